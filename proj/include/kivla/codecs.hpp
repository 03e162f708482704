#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "kivla/chunk.hpp"

namespace kivla::codec {

// --- orthonormal type-II DCT ---

// Basis matrix B with B * B^T = I; coefficients = B * signal.
std::vector<double> dct_basis(int n);  // n*n, row-major
std::vector<double> dct_forward(const std::vector<double>& signal);
std::vector<double> dct_inverse(const std::vector<double>& coeffs);

// --- scalar quantization (round half to even) ---

int64_t round_half_even(double v);
std::vector<int64_t> quantize(const std::vector<double>& coeffs, double scale);
std::vector<double> dequantize(const std::vector<int64_t>& indices, double scale);

// --- byte-pair encoding over integer symbol sequences ---

struct BpeVocab {
    int base_symbols = 0;
    int max_vocab = 0;
    std::vector<std::pair<int32_t, int32_t>> merges;  // merge i defines id base_symbols + i

    int size() const { return base_symbols + static_cast<int>(merges.size()); }
    std::vector<int32_t> encode(std::vector<int32_t> seq) const;
    std::vector<int32_t> decode(const std::vector<int32_t>& ids) const;
};

// Greedy most-frequent-pair merges; ties broken by the lexicographically
// smallest pair; stops at max_vocab or when no pair repeats.
BpeVocab bpe_train(const std::vector<std::vector<int32_t>>& corpus, int base_symbols,
                   int max_vocab);

// --- per-dimension value range (dataset 1st/99th percentile) ---

struct DimRange {
    double lo = -1.0;
    double hi = 1.0;
};

std::vector<DimRange> fit_ranges(const std::vector<ActionChunk>& data, double lo_pct = 1.0,
                                 double hi_pct = 99.0);
double normalize_value(double x, const DimRange& r);    // -> [-1, 1], clamped
double denormalize_value(double n, const DimRange& r);

// --- FAST-style codec: per-dimension DCT + quantization + BPE ---

struct FastCodec {
    int horizon = 8;
    int dim = 3;
    double scale = 16.0;
    std::vector<DimRange> ranges;
    BpeVocab bpe;

    // quantized indices span [-sym_offset, sym_offset]
    int sym_offset() const;
    int base_symbols() const { return 2 * sym_offset() + 1; }

    std::vector<int32_t> encode(const ActionChunk& chunk) const;
    ActionChunk decode(const std::vector<int32_t>& ids) const;

    static FastCodec fit(const std::vector<ActionChunk>& data, int horizon, int dim, double scale,
                         int vocab);
};

// --- naive per-dimension binning, optionally strided in time ---

struct NaiveBinCodec {
    int horizon = 8;
    int dim = 3;
    int bins = 256;
    int stride = 1;
    std::vector<DimRange> ranges;

    int coded_timesteps() const { return (horizon + stride - 1) / stride; }
    int token_count() const { return coded_timesteps() * dim; }

    std::vector<int32_t> encode(const ActionChunk& chunk) const;
    // decodes bin centers with zero-order hold over the stride
    ActionChunk decode(const std::vector<int32_t>& ids) const;
};

// --- state representations ---

enum class StateVariant { Text, SpecialToken, Continuous };

struct StateToken {
    enum class Kind { Digit, Separator, SpecialBin, Continuous };
    Kind kind;
    int value = 0;                 // digit 0..9 or bin id
    std::vector<double> payload;   // raw q for Continuous
};

struct StateEncoding {
    StateVariant variant = StateVariant::Continuous;
    int bins = 256;                // discrete variants
    std::vector<DimRange> ranges;  // per state dim

    std::vector<StateToken> encode(const std::vector<double>& q) const;
};

StateVariant state_variant_from_string(const std::string& s);
std::string to_string(StateVariant v);

// --- codec bundle used by training/inference ---

using ActionCodec = std::variant<FastCodec, NaiveBinCodec>;

int codec_token_vocab(const ActionCodec& c);  // ids fall in [0, vocab)
std::vector<int32_t> codec_encode(const ActionCodec& c, const ActionChunk& chunk);
ActionChunk codec_decode(const ActionCodec& c, const std::vector<int32_t>& ids);
const std::vector<DimRange>& codec_ranges(const ActionCodec& c);

std::string codec_to_json(const ActionCodec& c);
ActionCodec codec_from_json(const std::string& text);
void save_codec(const std::string& path, const ActionCodec& c);
ActionCodec load_codec(const std::string& path);

}  // namespace kivla::codec
