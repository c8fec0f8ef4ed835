#pragma once

// Two-component PCA by power iteration with deflation. Deterministic:
// fixed start vector, fixed iteration count.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace diffslt {

struct Pca2 {
    std::vector<double> mean;
    std::vector<double> pc1, pc2;
    double var1 = 0.0, var2 = 0.0;

    // rows: points x dims, row-major.
    static Pca2 fit(const std::vector<std::vector<double>>& rows) {
        if (rows.size() < 2) throw std::invalid_argument("pca: needs at least 2 points");
        const std::size_t dims = rows[0].size();
        Pca2 p;
        p.mean.assign(dims, 0.0);
        for (const auto& r : rows)
            for (std::size_t j = 0; j < dims; ++j) p.mean[j] += r[j];
        for (auto& m : p.mean) m /= static_cast<double>(rows.size());

        std::vector<std::vector<double>> centered(rows.size(), std::vector<double>(dims));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < dims; ++j) centered[i][j] = rows[i][j] - p.mean[j];

        auto cov_mul = [&](const std::vector<double>& v, const std::vector<double>* deflate, double dvar) {
            std::vector<double> out(dims, 0.0);
            for (const auto& r : centered) {
                double dot = 0.0;
                for (std::size_t j = 0; j < dims; ++j) dot += r[j] * v[j];
                for (std::size_t j = 0; j < dims; ++j) out[j] += dot * r[j];
            }
            for (auto& x : out) x /= static_cast<double>(rows.size() - 1);
            if (deflate) {
                double dv = 0.0;
                for (std::size_t j = 0; j < dims; ++j) dv += (*deflate)[j] * v[j];
                for (std::size_t j = 0; j < dims; ++j) out[j] -= dvar * dv * (*deflate)[j];
            }
            return out;
        };

        auto power = [&](const std::vector<double>* deflate, double dvar, double& eig) {
            std::vector<double> v(dims, 1.0 / std::sqrt(static_cast<double>(dims)));
            for (int it = 0; it < 200; ++it) {
                auto w = cov_mul(v, deflate, dvar);
                double norm = 0.0;
                for (double x : w) norm += x * x;
                norm = std::sqrt(norm);
                if (norm < 1e-30) break;  // degenerate direction
                for (std::size_t j = 0; j < dims; ++j) v[j] = w[j] / norm;
                eig = norm;
            }
            return v;
        };

        p.pc1 = power(nullptr, 0.0, p.var1);
        p.pc2 = power(&p.pc1, p.var1, p.var2);
        return p;
    }

    std::pair<double, double> project(const std::vector<double>& row) const {
        double a = 0.0, b = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            const double c = row[j] - mean[j];
            a += c * pc1[j];
            b += c * pc2[j];
        }
        return {a, b};
    }
};

}  // namespace diffslt
