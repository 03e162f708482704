#pragma once

#include <string>
#include <vector>

namespace kivla::vocab {

// Reserved word-level token ids.
constexpr int kPad = 0;
constexpr int kSep = 1;   // separates state dims / subtask text from action tokens
constexpr int kEos = 2;   // ends every causal target span
constexpr int kActQuery = 3;  // placeholder input for parallel action decoding

const std::vector<std::string>& words();
int word_id(const std::string& w);
const std::string& word(int id);
int digit_id(int digit);  // 0..9

// Layout of the combined output vocabulary: [text | action tokens | state bins].
struct CombinedLayout {
    int text_vocab = 64;
    int action_vocab = 256;
    int state_vocab = 32;

    int action_base() const { return text_vocab; }
    int state_base() const { return text_vocab + action_vocab; }
    int total() const { return text_vocab + action_vocab + state_vocab; }
};

}  // namespace kivla::vocab
