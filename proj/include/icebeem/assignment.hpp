#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "icebeem/matrix.hpp"

namespace icebeem {

struct Assignment {
    std::vector<std::size_t> permutation; // row i -> column permutation[i]
    double total = 0.0;                   // sum of selected costs
};

/// Optimal assignment on a square cost matrix by the Jonker-Volgenant
/// shortest augmenting path method (O(n^3), deterministic tie-breaking).
inline Assignment linear_sum_assignment(const Matrix& cost, bool maximize) {
    const std::size_t n = cost.rows();
    if (cost.cols() != n) throw std::invalid_argument("linear_sum_assignment: matrix not square");
    if (!cost.all_finite()) throw std::invalid_argument("linear_sum_assignment: non-finite cost");
    if (n == 0) return {};

    constexpr double kInf = std::numeric_limits<double>::infinity();
    auto c = [&](std::size_t i, std::size_t j) { return maximize ? -cost(i, j) : cost(i, j); };

    Vector u(n, 0.0), v(n, 0.0); // dual potentials
    std::vector<int> col4row(n, -1), row4col(n, -1);

    for (std::size_t cur_row = 0; cur_row < n; ++cur_row) {
        // Dijkstra over reduced costs until a free column is reached
        Vector shortest(n, kInf);
        std::vector<int> path(n, -1);
        std::vector<char> in_rows(n, 0);
        std::vector<char> in_cols(n, 0);
        std::vector<std::size_t> remaining(n);
        std::iota(remaining.begin(), remaining.end(), 0);
        std::size_t num_remaining = n;

        double min_val = 0.0;
        std::size_t i = cur_row;
        int sink = -1;
        while (sink == -1) {
            in_rows[i] = 1;
            std::size_t index_lowest = 0;
            double lowest = kInf;
            for (std::size_t it = 0; it < num_remaining; ++it) {
                const std::size_t j = remaining[it];
                const double r = min_val + c(i, j) - u[i] - v[j];
                if (r < shortest[j]) {
                    path[j] = static_cast<int>(i);
                    shortest[j] = r;
                }
                if (shortest[j] < lowest ||
                    (shortest[j] == lowest && row4col[remaining[index_lowest]] != -1 &&
                     row4col[j] == -1)) {
                    lowest = shortest[j];
                    index_lowest = it;
                }
            }
            min_val = lowest;
            const std::size_t j = remaining[index_lowest];
            if (row4col[j] == -1) {
                sink = static_cast<int>(j);
            } else {
                i = static_cast<std::size_t>(row4col[j]);
            }
            in_cols[j] = 1;
            remaining[index_lowest] = remaining[--num_remaining];
        }

        u[cur_row] += min_val;
        for (std::size_t r = 0; r < n; ++r)
            if (in_rows[r] && r != cur_row)
                u[r] += min_val - shortest[static_cast<std::size_t>(col4row[r])];
        for (std::size_t j = 0; j < n; ++j)
            if (in_cols[j]) v[j] -= min_val - shortest[j];

        // augment along the alternating path back to cur_row
        int j = sink;
        while (true) {
            const int r = path[static_cast<std::size_t>(j)];
            row4col[static_cast<std::size_t>(j)] = r;
            const int freed = col4row[static_cast<std::size_t>(r)];
            col4row[static_cast<std::size_t>(r)] = j;
            j = freed;
            if (static_cast<std::size_t>(r) == cur_row) break;
        }
    }

    Assignment out;
    out.permutation.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        out.permutation[r] = static_cast<std::size_t>(col4row[r]);
        out.total += cost(r, out.permutation[r]);
    }
    return out;
}

}  // namespace icebeem
