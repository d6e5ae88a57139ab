#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "fives/csv.hpp"
#include "fives/errors.hpp"
#include "fives/rng.hpp"
#include "fives/version.hpp"

namespace fives::data {

// Placeholder for merged rare categories. The control byte keeps it out
// of the way of ordinary cell values.
inline const std::string kRareToken = "\x01RARE";

inline constexpr std::array<int, 3> kGranularities = {10, 100, 1000};

enum class ColumnKind { Categorical, Numeric };

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::Categorical;
    std::optional<int> granularity;  // numeric only
};

struct Schema {
    std::vector<ColumnSpec> columns;
    std::string label_column;

    void validate() const {
        if (columns.empty()) throw SchemaError("schema: no feature columns");
        if (label_column.empty()) throw SchemaError("schema: label_column missing");
        std::unordered_map<std::string, int> seen;
        for (const auto& c : columns) {
            if (++seen[c.name] > 1) throw SchemaError("schema: duplicate column " + c.name);
            if (c.name == label_column)
                throw SchemaError("schema: label column listed as a feature: " + c.name);
            const bool has_g = c.granularity.has_value();
            if (c.kind == ColumnKind::Numeric) {
                if (!has_g) throw SchemaError("schema: numeric column " + c.name +
                                              " needs a granularity");
                if (std::find(kGranularities.begin(), kGranularities.end(), *c.granularity) ==
                    kGranularities.end())
                    throw SchemaError("schema: granularity of " + c.name +
                                      " must be one of 10, 100, 1000");
            } else if (has_g) {
                throw SchemaError("schema: categorical column " + c.name +
                                  " must not set granularity");
            }
        }
    }

    static Schema from_json(const nlohmann::json& j) {
        Schema s;
        if (!j.contains("columns") || !j.contains("label_column"))
            throw SchemaError("schema json needs 'columns' and 'label_column'");
        for (const auto& cj : j.at("columns")) {
            ColumnSpec c;
            c.name = cj.at("name").get<std::string>();
            const std::string kind = cj.at("kind").get<std::string>();
            if (kind == "categorical")
                c.kind = ColumnKind::Categorical;
            else if (kind == "numeric")
                c.kind = ColumnKind::Numeric;
            else
                throw SchemaError("schema: unknown kind '" + kind + "' for " + c.name);
            if (cj.contains("granularity")) c.granularity = cj.at("granularity").get<int>();
            s.columns.push_back(std::move(c));
        }
        s.label_column = j.at("label_column").get<std::string>();
        s.validate();
        return s;
    }

    static Schema load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw SchemaError("cannot open schema file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("schema json parse error: " + std::string(e.what()));
        }
        return from_json(j);
    }
};

// Per-column raw cells straight from the CSV; numeric columns carry the
// parsed values alongside.
struct RawColumn {
    ColumnSpec spec;
    std::vector<std::string> raw;
    std::vector<double> numeric;  // only for numeric columns
};

struct RawTable {
    std::vector<RawColumn> columns;
    std::vector<std::uint8_t> labels;
    std::size_t n_rows = 0;
};

inline RawTable load_csv(const std::string& path, const Schema& schema) {
    schema.validate();
    CsvReader reader(path);
    std::vector<std::string> header;
    if (!reader.next_record(header)) throw ParseError("csv: empty file " + path);

    std::unordered_map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < header.size(); ++i) pos[header[i]] = i;

    std::vector<std::size_t> col_at(schema.columns.size());
    for (std::size_t c = 0; c < schema.columns.size(); ++c) {
        auto it = pos.find(schema.columns[c].name);
        if (it == pos.end())
            throw SchemaError("csv: missing column '" + schema.columns[c].name + "'");
        col_at[c] = it->second;
    }
    auto lit = pos.find(schema.label_column);
    if (lit == pos.end())
        throw SchemaError("csv: missing label column '" + schema.label_column + "'");
    const std::size_t label_at = lit->second;

    RawTable table;
    table.columns.resize(schema.columns.size());
    for (std::size_t c = 0; c < schema.columns.size(); ++c)
        table.columns[c].spec = schema.columns[c];

    std::vector<std::string> fields;
    std::size_t row = 0;
    while (reader.next_record(fields)) {
        if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
        ++row;
        if (fields.size() != header.size())
            throw ParseError("csv row " + std::to_string(row) + ": " +
                             std::to_string(fields.size()) + " fields, header has " +
                             std::to_string(header.size()));
        const std::string& lv = fields[label_at];
        if (lv == "0")
            table.labels.push_back(0);
        else if (lv == "1")
            table.labels.push_back(1);
        else
            throw LabelError("csv row " + std::to_string(row) + ": label '" + lv +
                             "' is not binary");
        for (std::size_t c = 0; c < schema.columns.size(); ++c) {
            RawColumn& col = table.columns[c];
            const std::string& cell = fields[col_at[c]];
            col.raw.push_back(cell);
            if (col.spec.kind == ColumnKind::Numeric) {
                try {
                    std::size_t used = 0;
                    const double v = std::stod(cell, &used);
                    if (used != cell.size()) throw std::invalid_argument("trailing chars");
                    col.numeric.push_back(v);
                } catch (const std::exception&) {
                    throw ParseError("csv row " + std::to_string(row) + ", column '" +
                                     col.spec.name + "': cannot parse numeric cell '" + cell +
                                     "'");
                }
            }
        }
    }
    if (row == 0) throw ParseError("csv: no data rows in " + path);
    table.n_rows = row;
    return table;
}

// Equal-width bucketing into [0, granularity). A constant column lands
// entirely in bucket 0; the maximum clamps into the last bucket.
inline std::vector<std::int32_t> discretize_numeric(const std::vector<double>& values,
                                                    int granularity) {
    if (granularity < 2) throw ConfigError("discretize: granularity must be >= 2");
    if (values.empty()) throw ConfigError("discretize: empty column");
    double lo = values[0], hi = values[0];
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("discretize: non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<std::int32_t> buckets(values.size(), 0);
    if (lo == hi) return buckets;
    const double width = (hi - lo) / static_cast<double>(granularity);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto b = static_cast<std::int64_t>(std::floor((values[i] - lo) / width));
        b = std::clamp<std::int64_t>(b, 0, granularity - 1);
        buckets[i] = static_cast<std::int32_t>(b);
    }
    return buckets;
}

// Values whose frequency is below min_freq collapse into one shared
// identifier. Frequencies are counted on the input as-is; the merged
// token itself is never re-counted.
inline std::vector<std::string> merge_rare_values(const std::vector<std::string>& column,
                                                  std::size_t min_freq) {
    if (min_freq < 1) throw ConfigError("merge_rare_values: min_freq must be >= 1");
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& v : column) ++freq[v];
    std::vector<std::string> out;
    out.reserve(column.size());
    for (const auto& v : column) out.push_back(freq[v] < min_freq ? kRareToken : v);
    return out;
}

struct EncodedColumn {
    std::string name;
    std::vector<std::int32_t> codes;
    std::vector<std::string> vocab;  // code -> raw value (first-appearance order)
    std::optional<std::int32_t> rare_code;

    std::int32_t cardinality() const { return static_cast<std::int32_t>(vocab.size()); }

    const std::string& decode(std::int32_t code) const {
        if (code < 0 || code >= cardinality())
            throw DomainError("decode: code " + std::to_string(code) + " out of range for " +
                              name);
        return vocab[static_cast<std::size_t>(code)];
    }

    // Closed-world lookup: unseen values fall back to the RARE bucket.
    std::int32_t encode_value(const std::string& raw) const {
        for (std::size_t i = 0; i < vocab.size(); ++i)
            if (vocab[i] == raw) return static_cast<std::int32_t>(i);
        if (rare_code) return *rare_code;
        throw DomainError("encode: unseen value '" + raw + "' in column " + name +
                          " and no RARE bucket exists");
    }
};

struct EncodedTable {
    std::vector<EncodedColumn> columns;
    std::vector<std::uint8_t> labels;

    std::size_t n_rows() const { return labels.size(); }
    std::size_t n_features() const { return columns.size(); }

    std::vector<std::int32_t> cardinalities() const {
        std::vector<std::int32_t> c;
        c.reserve(columns.size());
        for (const auto& col : columns) c.push_back(col.cardinality());
        return c;
    }

    std::vector<std::string> feature_names() const {
        std::vector<std::string> n;
        n.reserve(columns.size());
        for (const auto& col : columns) n.push_back(col.name);
        return n;
    }

    void validate() const {
        for (const auto& col : columns) {
            if (col.codes.size() != labels.size())
                throw ContractError("table: column " + col.name + " has " +
                                    std::to_string(col.codes.size()) + " rows, labels " +
                                    std::to_string(labels.size()));
            for (auto code : col.codes)
                if (code < 0 || code >= col.cardinality())
                    throw ContractError("table: code out of range in " + col.name);
        }
        for (auto y : labels)
            if (y > 1) throw ContractError("table: non-binary label");
    }
};

// Dense first-appearance encoding of an already-categorical column.
inline EncodedColumn encode_categorical(const std::string& name,
                                        const std::vector<std::string>& values) {
    EncodedColumn col;
    col.name = name;
    col.codes.reserve(values.size());
    std::unordered_map<std::string, std::int32_t> to_code;
    for (const auto& v : values) {
        auto [it, inserted] = to_code.emplace(v, static_cast<std::int32_t>(col.vocab.size()));
        if (inserted) {
            col.vocab.push_back(v);
            if (v == kRareToken) col.rare_code = it->second;
        }
        col.codes.push_back(it->second);
    }
    return col;
}

struct PreprocessOptions {
    bool multi_granularity = false;
    std::size_t min_freq = 5;
};

// discretize (numeric) -> merge rare -> encode, per column. Bucket
// boundaries use the whole table so that later splits share one
// vocabulary.
inline EncodedTable encode_table(const RawTable& raw, const PreprocessOptions& opt = {}) {
    EncodedTable table;
    table.labels = raw.labels;
    for (const auto& col : raw.columns) {
        std::vector<std::pair<std::string, std::vector<std::string>>> expanded;
        if (col.spec.kind == ColumnKind::Numeric) {
            std::vector<int> grans;
            if (opt.multi_granularity)
                grans.assign(kGranularities.begin(), kGranularities.end());
            else
                grans.push_back(*col.spec.granularity);
            for (int g : grans) {
                auto buckets = discretize_numeric(col.numeric, g);
                std::vector<std::string> cells;
                cells.reserve(buckets.size());
                for (auto b : buckets) cells.push_back(std::to_string(b));
                std::string name = col.spec.name;
                if (opt.multi_granularity) name += "@" + std::to_string(g);
                expanded.emplace_back(std::move(name), std::move(cells));
            }
        } else {
            expanded.emplace_back(col.spec.name, col.raw);
        }
        for (auto& [name, cells] : expanded) {
            auto merged = merge_rare_values(cells, opt.min_freq);
            table.columns.push_back(encode_categorical(name, merged));
        }
    }
    table.validate();
    return table;
}

inline EncodedTable take_rows(const EncodedTable& table, const std::vector<std::size_t>& rows) {
    EncodedTable out;
    out.columns.reserve(table.columns.size());
    for (const auto& col : table.columns) {
        EncodedColumn c;
        c.name = col.name;
        c.vocab = col.vocab;
        c.rare_code = col.rare_code;
        c.codes.reserve(rows.size());
        for (std::size_t r : rows) c.codes.push_back(col.codes[r]);
        out.columns.push_back(std::move(c));
    }
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) out.labels.push_back(table.labels[r]);
    return out;
}

// Row-wise concatenation of splits that share vocab maps.
inline EncodedTable concat_tables(const EncodedTable& a, const EncodedTable& b) {
    if (a.n_features() != b.n_features())
        throw DimensionError("concat: tables disagree on feature count");
    EncodedTable out = a;
    for (std::size_t c = 0; c < a.n_features(); ++c) {
        if (a.columns[c].vocab != b.columns[c].vocab)
            throw ContractError("concat: column " + a.columns[c].name +
                                " does not share vocab maps");
        out.columns[c].codes.insert(out.columns[c].codes.end(), b.columns[c].codes.begin(),
                                    b.columns[c].codes.end());
    }
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.validate();
    return out;
}

struct SplitFractions {
    double train = 0.8, val = 0.1, test = 0.1;
};

struct Splits {
    EncodedTable train, val, test;
};

// Disjoint row partition covering [0, N); val and test round down and
// train takes the remainder. Vocab maps are shared across the parts.
inline Splits split_dataset(const EncodedTable& table, const SplitFractions& f,
                            std::uint64_t seed) {
    if (f.train <= 0 || f.val <= 0 || f.test <= 0)
        throw ConfigError("split: fractions must be positive");
    if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
        throw ConfigError("split: fractions must sum to 1");
    const std::size_t n = table.n_rows();
    const auto n_val = static_cast<std::size_t>(std::floor(f.val * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::floor(f.test * static_cast<double>(n)));
    if (n_val == 0 || n_test == 0 || n_val + n_test >= n)
        throw ConfigError("split: a split is empty at N=" + std::to_string(n));

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(seed);
    rng.shuffle(perm);

    const std::size_t n_train = n - n_val - n_test;
    std::vector<std::size_t> tr(perm.begin(), perm.begin() + n_train);
    std::vector<std::size_t> va(perm.begin() + n_train, perm.begin() + n_train + n_val);
    std::vector<std::size_t> te(perm.begin() + n_train + n_val, perm.end());
    std::sort(tr.begin(), tr.end());
    std::sort(va.begin(), va.end());
    std::sort(te.begin(), te.end());
    return {take_rows(table, tr), take_rows(table, va), take_rows(table, te)};
}

struct Batch {
    std::vector<std::size_t> indices;
    std::vector<std::int32_t> codes;  // size x m, row-major
    std::vector<double> labels;
    std::size_t m = 0;

    std::size_t size() const { return labels.size(); }
    std::int32_t code(std::size_t row, std::size_t col) const { return codes[row * m + col]; }
};

// Every row exactly once per epoch; the last batch may be short.
inline std::vector<Batch> make_batches(const EncodedTable& table, std::size_t batch_size,
                                       bool shuffle, std::uint64_t seed) {
    if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
    const std::size_t n = table.n_rows(), m = table.n_features();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (shuffle) {
        Rng rng(seed);
        rng.shuffle(order);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        Batch b;
        b.m = m;
        b.indices.assign(order.begin() + start, order.begin() + end);
        b.codes.reserve((end - start) * m);
        b.labels.reserve(end - start);
        for (std::size_t k = start; k < end; ++k) {
            const std::size_t r = order[k];
            for (std::size_t c = 0; c < m; ++c) b.codes.push_back(table.columns[c].codes[r]);
            b.labels.push_back(static_cast<double>(table.labels[r]));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

inline Batch whole_table_batch(const EncodedTable& table) {
    auto batches = make_batches(table, std::max<std::size_t>(1, table.n_rows()), false, 0);
    return batches.empty() ? Batch{} : std::move(batches.front());
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json table_to_json(const EncodedTable& table) {
    nlohmann::ordered_json j;
    j["format_version"] = kTableFormatVersion;
    j["n_rows"] = table.n_rows();
    j["labels"] = table.labels;
    nlohmann::ordered_json cols = nlohmann::ordered_json::array();
    for (const auto& col : table.columns) {
        nlohmann::ordered_json cj;
        cj["name"] = col.name;
        cj["cardinality"] = col.cardinality();
        cj["vocab"] = col.vocab;
        if (col.rare_code)
            cj["rare_code"] = *col.rare_code;
        else
            cj["rare_code"] = nullptr;
        cj["codes"] = col.codes;
        cols.push_back(std::move(cj));
    }
    j["columns"] = std::move(cols);
    return j;
}

inline EncodedTable table_from_json(const nlohmann::json& j) {
    if (!j.contains("format_version") || j.at("format_version").get<int>() != kTableFormatVersion)
        throw ParseError("table artifact: unsupported format_version");
    EncodedTable table;
    table.labels = j.at("labels").get<std::vector<std::uint8_t>>();
    for (const auto& cj : j.at("columns")) {
        EncodedColumn col;
        col.name = cj.at("name").get<std::string>();
        col.vocab = cj.at("vocab").get<std::vector<std::string>>();
        col.codes = cj.at("codes").get<std::vector<std::int32_t>>();
        if (!cj.at("rare_code").is_null()) col.rare_code = cj.at("rare_code").get<std::int32_t>();
        table.columns.push_back(std::move(col));
    }
    table.validate();
    return table;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ParseError("cannot write file: " + tmp);
        out << text;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw ParseError("cannot move " + tmp + " to " + path);
}

inline void save_table(const EncodedTable& table, const std::string& path) {
    write_text_atomic(path, table_to_json(table).dump());
}

inline EncodedTable load_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open table artifact: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("table artifact parse error: " + std::string(e.what()));
    }
    return table_from_json(j);
}

}  // namespace fives::data
