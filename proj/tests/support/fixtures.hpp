#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fives/data.hpp"
#include "fives/rng.hpp"

namespace fixtures {

// Two balanced binary features whose XOR drives the label, plus optional
// independent binary distractors. `noise` flips each label independently.
inline fives::data::EncodedTable xor_dataset(std::size_t n, double noise, std::uint64_t seed,
                                             std::size_t distractors = 0) {
    fives::Rng rng(seed);
    std::vector<std::vector<std::string>> cols(2 + distractors);
    std::vector<std::uint8_t> labels(n);
    for (auto& c : cols) c.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const int a = rng.bernoulli(0.5) ? 1 : 0;
        const int b = rng.bernoulli(0.5) ? 1 : 0;
        cols[0].push_back(std::to_string(a));
        cols[1].push_back(std::to_string(b));
        for (std::size_t d = 0; d < distractors; ++d)
            cols[2 + d].push_back(std::to_string(rng.bernoulli(0.5) ? 1 : 0));
        int y = a ^ b;
        if (noise > 0.0 && rng.bernoulli(noise)) y = 1 - y;
        labels[r] = static_cast<std::uint8_t>(y);
    }
    fives::data::EncodedTable t;
    t.labels = std::move(labels);
    t.columns.push_back(fives::data::encode_categorical("x1", cols[0]));
    t.columns.push_back(fives::data::encode_categorical("x2", cols[1]));
    for (std::size_t d = 0; d < distractors; ++d)
        t.columns.push_back(
            fives::data::encode_categorical("z" + std::to_string(d + 1), cols[2 + d]));
    return t;
}

// In-place label flips; used to corrupt only the training-side splits.
inline void flip_labels(fives::data::EncodedTable& t, double noise, std::uint64_t seed) {
    fives::Rng rng(seed);
    for (auto& y : t.labels)
        if (rng.bernoulli(noise)) y = y ? 0 : 1;
}

inline void write_table_csv(const fives::data::EncodedTable& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    for (std::size_t c = 0; c < t.n_features(); ++c) out << t.columns[c].name << ",";
    out << "label\n";
    for (std::size_t r = 0; r < t.n_rows(); ++r) {
        for (std::size_t c = 0; c < t.n_features(); ++c)
            out << t.columns[c].decode(t.columns[c].codes[r]) << ",";
        out << static_cast<int>(t.labels[r]) << "\n";
    }
}

inline std::string xor_schema_json(std::size_t distractors = 0) {
    std::string cols = R"([{"name":"x1","kind":"categorical"},{"name":"x2","kind":"categorical"})";
    for (std::size_t d = 0; d < distractors; ++d)
        cols += R"(,{"name":"z)" + std::to_string(d + 1) + R"(","kind":"categorical"})";
    cols += "]";
    return R"({"columns":)" + cols + R"(,"label_column":"label"})";
}

}  // namespace fixtures
