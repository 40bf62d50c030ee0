#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "icebeem/dataset.hpp"
#include "icebeem/matrix.hpp"

namespace icebeem {

// CSV files use full round-trip precision so that regenerated outputs are
// byte-identical.

inline void write_csv_row(std::ostream& out, const double* values, std::size_t n) {
    out << std::setprecision(17);
    for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << values[j];
}

/// Dataset CSV: header x_0..x_{d-1},y then one row per observation.
inline void write_dataset_csv(const LabeledDataset& data, const std::string& path,
                              const std::string& value_prefix = "x") {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("write_dataset_csv: cannot open " + path);
    for (std::size_t j = 0; j < data.dim(); ++j) out << value_prefix << "_" << j << ",";
    out << "y\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        write_csv_row(out, data.x.row_ptr(i), data.dim());
        out << "," << data.y[i] << "\n";
    }
}

inline LabeledDataset read_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("read_dataset_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("read_dataset_csv: empty file");
    std::size_t cols = 1;
    for (char c : line) cols += c == ',';
    if (cols < 2) throw std::invalid_argument("read_dataset_csv: need at least one x column");
    const std::size_t d = cols - 1;

    std::vector<double> values;
    std::vector<std::size_t> labels;
    std::size_t max_label = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::getline(ss, cell, ','))
                throw std::invalid_argument("read_dataset_csv: short row");
            values.push_back(std::stod(cell));
        }
        if (!std::getline(ss, cell, ',')) throw std::invalid_argument("read_dataset_csv: no label");
        const long label = std::stol(cell);
        if (label < 0) throw std::invalid_argument("read_dataset_csv: negative label");
        labels.push_back(static_cast<std::size_t>(label));
        max_label = std::max(max_label, labels.back());
    }
    LabeledDataset out;
    out.x = Matrix(labels.size(), d, std::move(values));
    out.y = std::move(labels);
    out.num_segments = out.y.empty() ? 0 : max_label + 1;
    return out;
}

/// Plain numeric matrix with a caller-provided header.
inline void write_matrix_csv(const Matrix& m, const std::vector<std::string>& header,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("write_matrix_csv: cannot open " + path);
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
    out << "\n";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        write_csv_row(out, m.row_ptr(i), m.cols());
        out << "\n";
    }
}

/// Loss history CSV: iteration,loss.
inline void write_history_csv(const Vector& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("write_history_csv: cannot open " + path);
    out << "iteration,loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < history.size(); ++i) out << i << "," << history[i] << "\n";
}

/// Writes content to <path>.tmp and renames it into place, so a crash never
/// leaves a partial file at the final path.
inline void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::invalid_argument("write_file_atomic: cannot open " + tmp);
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace icebeem
