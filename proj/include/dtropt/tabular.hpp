#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dtropt/errors.hpp"

namespace dtropt {

/// One-row-per-patient longitudinal table. Covariates and the outcome are
/// real-valued; treatment columns are {0,1}-coded, one per decision stage.
/// Immutable after construction and safe to share by reference.
class Dataset {
public:
    Dataset(std::string id_col,
            std::vector<std::string> column_names,
            std::vector<std::string> ids,
            std::vector<std::vector<double>> columns,
            std::vector<std::string> treat_cols,
            std::string outcome_col)
        : id_col_(std::move(id_col)),
          column_names_(std::move(column_names)),
          ids_(std::move(ids)),
          columns_(std::move(columns)),
          treat_cols_(std::move(treat_cols)),
          outcome_col_(std::move(outcome_col)) {
        for (std::size_t j = 0; j < column_names_.size(); ++j)
            index_[column_names_[j]] = j;
        validate();
    }

    std::size_t n() const { return ids_.size(); }
    std::size_t stages() const { return treat_cols_.size(); }
    const std::string& id_col() const { return id_col_; }
    const std::string& outcome_col() const { return outcome_col_; }
    const std::vector<std::string>& treat_cols() const { return treat_cols_; }
    const std::vector<std::string>& column_names() const { return column_names_; }
    const std::vector<std::string>& ids() const { return ids_; }

    bool has_column(const std::string& name) const { return index_.count(name) > 0; }

    const std::vector<double>& column(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("no such column: " + name);
        return columns_[it->second];
    }

    double value(const std::string& name, std::size_t row) const {
        return column(name)[row];
    }

    /// Treatment of patient `row` at stage `k` (0-based), as 0 or 1.
    int treatment(std::size_t row, std::size_t k) const {
        return static_cast<int>(column(treat_cols_.at(k))[row]);
    }

    double outcome(std::size_t row) const { return column(outcome_col_)[row]; }

private:
    void validate() const {
        if (treat_cols_.empty()) throw DataError("at least one treatment column is required");
        if (ids_.size() < 2) throw DataError("dataset must contain at least 2 patients");
        std::unordered_set<std::string> seen;
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            if (!seen.insert(ids_[i]).second)
                throw DataError("duplicated patient id '" + ids_[i] + "'");
        }
        for (const auto& col : columns_)
            if (col.size() != ids_.size())
                throw DataError("ragged column storage");
        for (const auto& tc : treat_cols_) {
            const auto& col = column(tc);
            for (std::size_t i = 0; i < col.size(); ++i)
                if (col[i] != 0.0 && col[i] != 1.0)
                    throw DataError("treatment column " + tc + " has non-{0,1} value in row " +
                                    std::to_string(i + 1));
        }
        column(outcome_col_);  // presence check
    }

    std::string id_col_;
    std::vector<std::string> column_names_;  // ingestion order, id column excluded
    std::vector<std::string> ids_;
    std::vector<std::vector<double>> columns_;
    std::vector<std::string> treat_cols_;
    std::string outcome_col_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    for (char c : line) {
        if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    out.push_back(field);
    return out;
}

inline double parse_number(const std::string& s, std::size_t row, const std::string& col) {
    if (s.empty())
        throw DataError("missing value in row " + std::to_string(row) + ", column " + col);
    double v;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw DataError("unparseable numeric '" + s + "' in row " + std::to_string(row) +
                        ", column " + col);
    return v;
}

}  // namespace detail

/// Reads a CSV file (comma delimiter, '.' decimal, mandatory header) into a
/// validated Dataset. Stage order follows `treat_cols`; column order in the
/// Dataset follows the file header.
inline Dataset load_csv(const std::string& path,
                        const std::string& id_col,
                        const std::vector<std::string>& treat_cols,
                        const std::string& outcome_col) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty file: " + path);
    std::vector<std::string> header = detail::split_csv_line(line);

    std::size_t id_idx = header.size();
    for (std::size_t j = 0; j < header.size(); ++j)
        if (header[j] == id_col) id_idx = j;
    if (id_idx == header.size()) throw DataError("missing column: " + id_col);
    for (const auto& name : treat_cols)
        if (std::find(header.begin(), header.end(), name) == header.end())
            throw DataError("missing column: " + name);
    if (std::find(header.begin(), header.end(), outcome_col) == header.end())
        throw DataError("missing column: " + outcome_col);

    std::vector<std::string> column_names;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (j != id_idx) column_names.push_back(header[j]);

    std::vector<std::string> ids;
    std::vector<std::vector<double>> columns(column_names.size());
    std::size_t row = 1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++row;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw DataError("row " + std::to_string(row - 1) + " has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(header.size()));
        std::size_t out_j = 0;
        for (std::size_t j = 0; j < fields.size(); ++j) {
            if (j == id_idx) {
                ids.push_back(fields[j]);
            } else {
                columns[out_j].push_back(detail::parse_number(fields[j], row - 1, header[j]));
                ++out_j;
            }
        }
    }
    return Dataset(id_col, std::move(column_names), std::move(ids), std::move(columns),
                   treat_cols, outcome_col);
}

/// Writes a Dataset back to CSV. Reals are serialized with 17 significant
/// digits so that load(emit(D)) round-trips exactly at double precision.
inline void emit_csv(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out << data.id_col();
    for (const auto& name : data.column_names()) out << ',' << name;
    out << '\n';
    char buf[64];
    for (std::size_t i = 0; i < data.n(); ++i) {
        out << data.ids()[i];
        for (const auto& name : data.column_names()) {
            double v = data.value(name, i);
            if (v == static_cast<long long>(v) && std::abs(v) < 1e15) {
                std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(v));
            } else {
                std::snprintf(buf, sizeof buf, "%.17g", v);
            }
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("write failure: " + path);
}

}  // namespace dtropt
