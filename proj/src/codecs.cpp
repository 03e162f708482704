#include "kivla/codecs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kivla::codec {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

std::vector<double> dct_basis(int n) {
    std::vector<double> b(static_cast<size_t>(n) * n);
    const double a0 = std::sqrt(1.0 / n);
    const double ak = std::sqrt(2.0 / n);
    for (int k = 0; k < n; ++k) {
        for (int i = 0; i < n; ++i) {
            b[static_cast<size_t>(k) * n + i] =
                (k == 0 ? a0 : ak) * std::cos(kPi / n * (i + 0.5) * k);
        }
    }
    return b;
}

std::vector<double> dct_forward(const std::vector<double>& signal) {
    const int n = static_cast<int>(signal.size());
    if (n < 1) throw std::invalid_argument("dct_forward: empty signal");
    const auto b = dct_basis(n);
    std::vector<double> out(n, 0.0);
    for (int k = 0; k < n; ++k) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += b[static_cast<size_t>(k) * n + i] * signal[i];
        out[k] = s;
    }
    return out;
}

std::vector<double> dct_inverse(const std::vector<double>& coeffs) {
    const int n = static_cast<int>(coeffs.size());
    if (n < 1) throw std::invalid_argument("dct_inverse: empty coefficients");
    const auto b = dct_basis(n);
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int k = 0; k < n; ++k) s += b[static_cast<size_t>(k) * n + i] * coeffs[k];
        out[i] = s;
    }
    return out;
}

int64_t round_half_even(double v) {
    const double f = std::floor(v);
    const double d = v - f;
    const auto fi = static_cast<int64_t>(f);
    if (d < 0.5) return fi;
    if (d > 0.5) return fi + 1;
    return (fi % 2 == 0) ? fi : fi + 1;
}

std::vector<int64_t> quantize(const std::vector<double>& coeffs, double scale) {
    if (!(scale > 0)) throw std::invalid_argument("quantize: scale must be positive");
    std::vector<int64_t> out(coeffs.size());
    for (size_t i = 0; i < coeffs.size(); ++i) out[i] = round_half_even(coeffs[i] * scale);
    return out;
}

std::vector<double> dequantize(const std::vector<int64_t>& indices, double scale) {
    if (!(scale > 0)) throw std::invalid_argument("dequantize: scale must be positive");
    std::vector<double> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) out[i] = static_cast<double>(indices[i]) / scale;
    return out;
}

std::vector<int32_t> BpeVocab::encode(std::vector<int32_t> seq) const {
    for (int32_t s : seq) {
        if (s < 0 || s >= base_symbols) {
            throw std::out_of_range("bpe encode: base symbol " + std::to_string(s) +
                                    " outside [0, " + std::to_string(base_symbols) + ")");
        }
    }
    std::vector<int32_t> next;
    for (size_t m = 0; m < merges.size(); ++m) {
        const int32_t a = merges[m].first;
        const int32_t b = merges[m].second;
        const auto id = static_cast<int32_t>(base_symbols + m);
        next.clear();
        size_t i = 0;
        while (i < seq.size()) {
            if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
                next.push_back(id);
                i += 2;
            } else {
                next.push_back(seq[i]);
                ++i;
            }
        }
        seq.swap(next);
    }
    return seq;
}

std::vector<int32_t> BpeVocab::decode(const std::vector<int32_t>& ids) const {
    std::vector<int32_t> out;
    out.reserve(ids.size() * 2);
    // expand iteratively with an explicit stack
    std::vector<int32_t> stack;
    for (int32_t id : ids) {
        stack.push_back(id);
        while (!stack.empty()) {
            int32_t t = stack.back();
            stack.pop_back();
            if (t < 0 || t >= size()) {
                throw std::out_of_range("bpe decode: token id " + std::to_string(t) +
                                        " outside vocab of " + std::to_string(size()));
            }
            if (t < base_symbols) {
                out.push_back(t);
            } else {
                const auto& m = merges[static_cast<size_t>(t) - base_symbols];
                stack.push_back(m.second);
                stack.push_back(m.first);
            }
        }
    }
    return out;
}

BpeVocab bpe_train(const std::vector<std::vector<int32_t>>& corpus, int base_symbols,
                   int max_vocab) {
    if (corpus.empty()) throw std::invalid_argument("bpe_train: empty corpus");
    if (max_vocab < base_symbols) {
        throw std::invalid_argument("bpe_train: max_vocab " + std::to_string(max_vocab) +
                                    " below base symbol count " + std::to_string(base_symbols));
    }
    BpeVocab vocab;
    vocab.base_symbols = base_symbols;
    vocab.max_vocab = max_vocab;

    std::vector<std::vector<int32_t>> work = corpus;
    for (const auto& seq : work) {
        for (int32_t s : seq) {
            if (s < 0 || s >= base_symbols) {
                throw std::out_of_range("bpe_train: corpus symbol " + std::to_string(s) +
                                        " outside [0, " + std::to_string(base_symbols) + ")");
            }
        }
    }

    while (vocab.size() < max_vocab) {
        std::map<std::pair<int32_t, int32_t>, int64_t> counts;
        for (const auto& seq : work) {
            for (size_t i = 0; i + 1 < seq.size(); ++i) {
                ++counts[{seq[i], seq[i + 1]}];
            }
        }
        std::pair<int32_t, int32_t> best{0, 0};
        int64_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (count > best_count) {  // map iteration is ordered, ties keep the smallest pair
                best_count = count;
                best = pair;
            }
        }
        if (best_count < 2) break;

        const auto id = static_cast<int32_t>(vocab.size());
        vocab.merges.push_back(best);
        std::vector<int32_t> next;
        for (auto& seq : work) {
            next.clear();
            size_t i = 0;
            while (i < seq.size()) {
                if (i + 1 < seq.size() && seq[i] == best.first && seq[i + 1] == best.second) {
                    next.push_back(id);
                    i += 2;
                } else {
                    next.push_back(seq[i]);
                    ++i;
                }
            }
            seq.swap(next);
        }
    }
    return vocab;
}

std::vector<DimRange> fit_ranges(const std::vector<ActionChunk>& data, double lo_pct,
                                 double hi_pct) {
    if (data.empty()) throw std::invalid_argument("fit_ranges: no data");
    const int d = data[0].dim;
    std::vector<DimRange> out(d);
    std::vector<double> col;
    for (int j = 0; j < d; ++j) {
        col.clear();
        for (const auto& c : data) {
            for (int t = 0; t < c.horizon; ++t) col.push_back(c.at(t, j));
        }
        std::sort(col.begin(), col.end());
        auto pct = [&](double q) {
            const double pos = q / 100.0 * (static_cast<double>(col.size()) - 1.0);
            const auto i0 = static_cast<size_t>(std::floor(pos));
            const size_t i1 = std::min(i0 + 1, col.size() - 1);
            const double w = pos - static_cast<double>(i0);
            return col[i0] * (1.0 - w) + col[i1] * w;
        };
        out[j].lo = pct(lo_pct);
        out[j].hi = pct(hi_pct);
        if (!(out[j].hi > out[j].lo)) out[j].hi = out[j].lo + 1e-6;
    }
    return out;
}

double normalize_value(double x, const DimRange& r) {
    const double n = 2.0 * (x - r.lo) / (r.hi - r.lo) - 1.0;
    return std::clamp(n, -1.0, 1.0);
}

double denormalize_value(double n, const DimRange& r) {
    return r.lo + (n + 1.0) * 0.5 * (r.hi - r.lo);
}

int FastCodec::sym_offset() const {
    return static_cast<int>(std::floor(std::sqrt(static_cast<double>(horizon)) * scale)) + 1;
}

std::vector<int32_t> FastCodec::encode(const ActionChunk& chunk) const {
    if (chunk.horizon != horizon || chunk.dim != dim) {
        throw std::invalid_argument("fast encode: chunk " + std::to_string(chunk.horizon) + "x" +
                                    std::to_string(chunk.dim) + " does not match codec " +
                                    std::to_string(horizon) + "x" + std::to_string(dim));
    }
    const int k = sym_offset();
    std::vector<int32_t> symbols;
    symbols.reserve(static_cast<size_t>(horizon) * dim);
    std::vector<double> col(horizon);
    for (int j = 0; j < dim; ++j) {  // dimension-major, coefficient-minor
        for (int t = 0; t < horizon; ++t) col[t] = normalize_value(chunk.at(t, j), ranges[j]);
        const auto coeffs = dct_forward(col);
        const auto idx = quantize(coeffs, scale);
        for (int64_t q : idx) symbols.push_back(static_cast<int32_t>(q) + k);
    }
    return bpe.encode(std::move(symbols));
}

ActionChunk FastCodec::decode(const std::vector<int32_t>& ids) const {
    const auto symbols = bpe.decode(ids);
    const size_t expect = static_cast<size_t>(horizon) * dim;
    if (symbols.size() != expect) {
        throw std::invalid_argument("fast decode: expanded to " + std::to_string(symbols.size()) +
                                    " base symbols, expected " + std::to_string(expect));
    }
    const int k = sym_offset();
    ActionChunk chunk(horizon, dim);
    std::vector<double> coeffs(horizon);
    for (int j = 0; j < dim; ++j) {
        for (int t = 0; t < horizon; ++t) {
            coeffs[t] =
                static_cast<double>(symbols[static_cast<size_t>(j) * horizon + t] - k) / scale;
        }
        const auto col = dct_inverse(coeffs);
        for (int t = 0; t < horizon; ++t) chunk.at(t, j) = denormalize_value(col[t], ranges[j]);
    }
    return chunk;
}

FastCodec FastCodec::fit(const std::vector<ActionChunk>& data, int horizon, int dim, double scale,
                         int vocab) {
    FastCodec c;
    c.horizon = horizon;
    c.dim = dim;
    c.scale = scale;
    c.ranges = fit_ranges(data);
    // train BPE on the quantized symbol corpus
    BpeVocab tmp;
    tmp.base_symbols = c.base_symbols();
    tmp.max_vocab = vocab;
    c.bpe = tmp;  // identity vocab so encode() emits raw symbols
    std::vector<std::vector<int32_t>> corpus;
    corpus.reserve(data.size());
    for (const auto& chunk : data) corpus.push_back(c.encode(chunk));
    c.bpe = bpe_train(corpus, c.base_symbols(), vocab);
    return c;
}

std::vector<int32_t> NaiveBinCodec::encode(const ActionChunk& chunk) const {
    if (chunk.horizon != horizon || chunk.dim != dim) {
        throw std::invalid_argument("naive encode: chunk shape mismatch");
    }
    std::vector<int32_t> out;
    out.reserve(token_count());
    for (int t = 0; t < horizon; t += stride) {
        for (int j = 0; j < dim; ++j) {
            const DimRange& r = ranges[j];
            const double rel = (chunk.at(t, j) - r.lo) / (r.hi - r.lo);
            const auto bin = static_cast<int32_t>(std::floor(rel * bins));
            out.push_back(std::clamp(bin, 0, bins - 1));
        }
    }
    return out;
}

ActionChunk NaiveBinCodec::decode(const std::vector<int32_t>& ids) const {
    if (static_cast<int>(ids.size()) != token_count()) {
        throw std::invalid_argument("naive decode: got " + std::to_string(ids.size()) +
                                    " tokens, expected " + std::to_string(token_count()));
    }
    ActionChunk chunk(horizon, dim);
    for (int t = 0; t < horizon; ++t) {
        const int coded = t / stride;
        for (int j = 0; j < dim; ++j) {
            const int32_t bin =
                std::clamp(ids[static_cast<size_t>(coded) * dim + j], 0, bins - 1);
            const DimRange& r = ranges[j];
            chunk.at(t, j) = r.lo + (bin + 0.5) * (r.hi - r.lo) / bins;
        }
    }
    return chunk;
}

std::vector<StateToken> StateEncoding::encode(const std::vector<double>& q) const {
    std::vector<StateToken> out;
    switch (variant) {
        case StateVariant::Text: {
            for (size_t j = 0; j < q.size(); ++j) {
                const DimRange& r = ranges[j];
                const double rel = (q[j] - r.lo) / (r.hi - r.lo);
                const int bin =
                    std::clamp(static_cast<int>(std::floor(rel * bins)), 0, bins - 1) + 1;
                std::string digits = std::to_string(bin);
                for (char c : digits) {
                    out.push_back({StateToken::Kind::Digit, c - '0', {}});
                }
                out.push_back({StateToken::Kind::Separator, 0, {}});
            }
            break;
        }
        case StateVariant::SpecialToken: {
            for (size_t j = 0; j < q.size(); ++j) {
                const DimRange& r = ranges[j];
                const double rel = (q[j] - r.lo) / (r.hi - r.lo);
                const int bin = std::clamp(static_cast<int>(std::floor(rel * bins)), 0, bins - 1);
                out.push_back({StateToken::Kind::SpecialBin, bin, {}});
            }
            break;
        }
        case StateVariant::Continuous:
            out.push_back({StateToken::Kind::Continuous, 0, q});
            break;
    }
    return out;
}

StateVariant state_variant_from_string(const std::string& s) {
    if (s == "text") return StateVariant::Text;
    if (s == "special") return StateVariant::SpecialToken;
    if (s == "continuous") return StateVariant::Continuous;
    throw std::invalid_argument("unknown state encoding '" + s + "'");
}

std::string to_string(StateVariant v) {
    switch (v) {
        case StateVariant::Text: return "text";
        case StateVariant::SpecialToken: return "special";
        case StateVariant::Continuous: return "continuous";
    }
    return "?";
}

int codec_token_vocab(const ActionCodec& c) {
    if (const auto* f = std::get_if<FastCodec>(&c)) return f->bpe.max_vocab;
    return std::get<NaiveBinCodec>(c).bins;
}

std::vector<int32_t> codec_encode(const ActionCodec& c, const ActionChunk& chunk) {
    return std::visit([&](const auto& x) { return x.encode(chunk); }, c);
}

ActionChunk codec_decode(const ActionCodec& c, const std::vector<int32_t>& ids) {
    return std::visit([&](const auto& x) { return x.decode(ids); }, c);
}

const std::vector<DimRange>& codec_ranges(const ActionCodec& c) {
    if (const auto* f = std::get_if<FastCodec>(&c)) return f->ranges;
    return std::get<NaiveBinCodec>(c).ranges;
}

namespace {

nlohmann::json ranges_to_json(const std::vector<DimRange>& r) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& d : r) a.push_back({d.lo, d.hi});
    return a;
}

std::vector<DimRange> ranges_from_json(const nlohmann::json& a) {
    std::vector<DimRange> out;
    for (const auto& d : a) out.push_back({d.at(0).get<double>(), d.at(1).get<double>()});
    return out;
}

}  // namespace

std::string codec_to_json(const ActionCodec& c) {
    nlohmann::json j;
    if (const auto* f = std::get_if<FastCodec>(&c)) {
        j["kind"] = "fast";
        j["horizon"] = f->horizon;
        j["dim"] = f->dim;
        j["scale"] = f->scale;
        j["ranges"] = ranges_to_json(f->ranges);
        nlohmann::json merges = nlohmann::json::array();
        for (const auto& m : f->bpe.merges) merges.push_back({m.first, m.second});
        j["bpe"] = {{"base_symbols", f->bpe.base_symbols},
                    {"max_vocab", f->bpe.max_vocab},
                    {"merges", merges}};
    } else {
        const auto& n = std::get<NaiveBinCodec>(c);
        j["kind"] = "naive";
        j["horizon"] = n.horizon;
        j["dim"] = n.dim;
        j["bins"] = n.bins;
        j["stride"] = n.stride;
        j["ranges"] = ranges_to_json(n.ranges);
    }
    return j.dump(2);
}

ActionCodec codec_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "fast") {
        FastCodec f;
        f.horizon = j.at("horizon").get<int>();
        f.dim = j.at("dim").get<int>();
        f.scale = j.at("scale").get<double>();
        f.ranges = ranges_from_json(j.at("ranges"));
        f.bpe.base_symbols = j.at("bpe").at("base_symbols").get<int>();
        f.bpe.max_vocab = j.at("bpe").at("max_vocab").get<int>();
        for (const auto& m : j.at("bpe").at("merges")) {
            f.bpe.merges.emplace_back(m.at(0).get<int32_t>(), m.at(1).get<int32_t>());
        }
        return f;
    }
    if (kind == "naive") {
        NaiveBinCodec n;
        n.horizon = j.at("horizon").get<int>();
        n.dim = j.at("dim").get<int>();
        n.bins = j.at("bins").get<int>();
        n.stride = j.at("stride").get<int>();
        n.ranges = ranges_from_json(j.at("ranges"));
        return n;
    }
    throw std::invalid_argument("unknown codec kind '" + kind + "'");
}

void save_codec(const std::string& path, const ActionCodec& c) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write codec file " + path);
    f << codec_to_json(c) << "\n";
}

ActionCodec load_codec(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read codec file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return codec_from_json(ss.str());
}

}  // namespace kivla::codec
