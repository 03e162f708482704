#include "kivla/vocab.hpp"

#include <stdexcept>
#include <unordered_map>

namespace kivla::vocab {

const std::vector<std::string>& words() {
    static const std::vector<std::string> kWords = {
        "<pad>", "<sep>", "<eos>", "<aq>",
        "put", "the", "in", "to", "a", "where", "is", "row", "col",
        "red", "green", "blue", "yellow",
        "square", "circle", "triangle", "star",
        "bin", "tray", "box", "shelf",
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    };
    return kWords;
}

int word_id(const std::string& w) {
    static const std::unordered_map<std::string, int> kIndex = [] {
        std::unordered_map<std::string, int> m;
        const auto& ws = words();
        for (size_t i = 0; i < ws.size(); ++i) m[ws[i]] = static_cast<int>(i);
        return m;
    }();
    auto it = kIndex.find(w);
    if (it == kIndex.end()) throw std::out_of_range("vocab: unknown word '" + w + "'");
    return it->second;
}

const std::string& word(int id) {
    const auto& ws = words();
    if (id < 0 || id >= static_cast<int>(ws.size())) {
        throw std::out_of_range("vocab: bad word id " + std::to_string(id));
    }
    return ws[id];
}

int digit_id(int digit) {
    if (digit < 0 || digit > 9) throw std::out_of_range("vocab: bad digit " + std::to_string(digit));
    return word_id(std::string(1, static_cast<char>('0' + digit)));
}

}  // namespace kivla::vocab
