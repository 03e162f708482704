#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace kivla {

// H x d matrix of future actions relative to the current state, row-major.
struct ActionChunk {
    int horizon = 0;
    int dim = 0;
    std::vector<double> values;

    ActionChunk() = default;
    ActionChunk(int h, int d) : horizon(h), dim(d), values(static_cast<size_t>(h) * d, 0.0) {}
    ActionChunk(int h, int d, std::vector<double> v) : horizon(h), dim(d), values(std::move(v)) {
        if (values.size() != static_cast<size_t>(h) * d) {
            throw std::invalid_argument("ActionChunk: " + std::to_string(values.size()) +
                                        " values for " + std::to_string(h) + "x" +
                                        std::to_string(d));
        }
    }

    double& at(int t, int j) { return values[static_cast<size_t>(t) * dim + j]; }
    double at(int t, int j) const { return values[static_cast<size_t>(t) * dim + j]; }

    size_t size() const { return values.size(); }
};

}  // namespace kivla
