#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icebeem/matrix.hpp"

namespace icebeem {

/// Observations x with their segment indices y.
struct LabeledDataset {
    Matrix x;                    // n x d
    std::vector<std::size_t> y;  // n
    std::size_t num_segments = 0;

    std::size_t size() const { return x.rows(); }
    std::size_t dim() const { return x.cols(); }

    void validate() const {
        if (y.size() != x.rows()) throw std::invalid_argument("LabeledDataset: label count mismatch");
        for (std::size_t s : y)
            if (s >= num_segments)
                throw std::invalid_argument("LabeledDataset: segment index out of range");
        if (!x.all_finite()) throw std::invalid_argument("LabeledDataset: non-finite observation");
    }

    std::vector<std::size_t> rows_of_segment(std::size_t segment) const {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y[i] == segment) rows.push_back(i);
        return rows;
    }

    LabeledDataset subset(const std::vector<std::size_t>& rows) const {
        LabeledDataset out;
        out.x = Matrix(rows.size(), dim());
        out.y.resize(rows.size());
        out.num_segments = num_segments;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            out.x.set_row(i, x.row(rows[i]));
            out.y[i] = y[rows[i]];
        }
        return out;
    }

    /// Keeps only the given segments and renumbers them 0..k-1 in the order
    /// given.
    LabeledDataset restricted_to(const std::vector<std::size_t>& segments) const {
        LabeledDataset out;
        out.num_segments = segments.size();
        std::vector<std::size_t> rows;
        std::vector<std::size_t> new_label;
        for (std::size_t i = 0; i < size(); ++i) {
            for (std::size_t s = 0; s < segments.size(); ++s) {
                if (y[i] == segments[s]) {
                    rows.push_back(i);
                    new_label.push_back(s);
                    break;
                }
            }
        }
        out.x = Matrix(rows.size(), dim());
        out.y = std::move(new_label);
        for (std::size_t i = 0; i < rows.size(); ++i) out.x.set_row(i, x.row(rows[i]));
        return out;
    }
};

}  // namespace icebeem
