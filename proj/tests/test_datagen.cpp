#include <catch_amalgamated.hpp>

#include "icebeem/datagen.hpp"
#include "test_util.hpp"

using namespace icebeem;
using testutil::max_abs_diff;

TEST_CASE("generate_modulations bounds, determinism, degenerate rejection", "[datagen]") {
    Rng rng(1);
    const Matrix l = generate_modulations(8, 5, 0.5, 3.0, rng);
    for (std::size_t i = 0; i < l.size(); ++i) {
        CHECK(l.data()[i] >= 0.5);
        CHECK(l.data()[i] < 3.0);
    }
    Rng r2(1);
    CHECK(generate_modulations(8, 5, 0.5, 3.0, r2) == l);

    Rng r3(2);
    CHECK_THROWS_AS(generate_modulations(3, 2, 1.0, 1.0, r3), std::invalid_argument);
}

TEST_CASE("ica latents have the configured precisions and independence", "[datagen]") {
    Matrix lambdas(2, 3);
    for (std::size_t j = 0; j < 3; ++j) {
        lambdas(0, j) = 1.0;
        lambdas(1, j) = 4.0;
    }
    const std::size_t n = 100000;
    std::vector<std::size_t> y(n, 0);
    Rng rng(3);
    const Matrix z = sample_ica_latents(lambdas, y, rng);

    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
            double cov = 0.0;
            for (std::size_t i = 0; i < n; ++i) cov += z(i, a) * z(i, b);
            cov /= n;
            CHECK(std::abs(cov - (a == b ? 1.0 : 0.0)) < 0.03);
        }

    // cross-component correlations are null
    const Matrix corr = pearson_abs_corr(z, z);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            if (a != b) CHECK(corr(a, b) < 0.02);

    // huge precision shrinks the variance accordingly
    Matrix big(1, 1);
    big(0, 0) = 1e6;
    std::vector<std::size_t> y2(20000, 0);
    Rng rng2(4);
    const Matrix z2 = sample_ica_latents(big, y2, rng2);
    double var = 0.0;
    for (std::size_t i = 0; i < z2.rows(); ++i) var += z2(i, 0) * z2(i, 0);
    var /= z2.rows();
    CHECK(var < 2e-6);
    CHECK(var > 0.5e-6);
}

TEST_CASE("random_spd is symmetric positive definite with spectrum in range", "[datagen]") {
    Rng rng(5);
    const Matrix a = random_spd(5, 0.5, 2.0, rng);
    CHECK(max_abs_diff(a, transpose(a)) < 1e-12);
    const SvdResult s = svd(a);
    for (double e : s.singular_values) {
        CHECK(e >= 0.5 - 1e-9);
        CHECK(e <= 2.0 + 1e-9);
    }

    Rng rng2(6);
    const Matrix eye = random_spd(4, 1.0, 1.0, rng2);
    CHECK(max_abs_diff(eye, Matrix::identity(4)) < 1e-12);
}

TEST_CASE("segment covariance limits", "[datagen]") {
    Rng rng(7);
    const Matrix sigma0 = random_spd(4, 0.5, 2.0, rng);

    // no modulation leaves the base covariance
    CHECK(max_abs_diff(segment_covariance(sigma0, Vector(4, 0.0)), sigma0) < 1e-9);

    // identity base gives a diagonal 1/(1+lambda)
    const Vector lam{0.5, 1.0, 2.0, 4.0};
    const Matrix cov = segment_covariance(Matrix::identity(4), lam);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(cov(i, j) == Catch::Approx(i == j ? 1.0 / (1.0 + lam[i]) : 0.0).margin(1e-12));

    // appendix variant inverts the diagonal term
    const Matrix cov2 = segment_covariance(Matrix::identity(4), lam, true);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(cov2(i, i) == Catch::Approx(1.0 / (1.0 + 1.0 / lam[i])).margin(1e-12));
}

TEST_CASE("imca latents match their analytic covariance", "[datagen]") {
    Rng rng(8);
    const Matrix sigma0 = random_spd(3, 0.5, 2.0, rng);
    Matrix lambdas(2, 3);
    for (std::size_t j = 0; j < 3; ++j) {
        lambdas(0, j) = 0.5 + 0.3 * j;
        lambdas(1, j) = 2.0 - 0.4 * j;
    }
    const std::size_t n = 100000;
    std::vector<std::size_t> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = i % 2;
    Rng zr(9);
    const Matrix z = sample_imca_latents(sigma0, lambdas, y, zr);

    for (std::size_t seg = 0; seg < 2; ++seg) {
        const Matrix expect = segment_covariance(sigma0, lambdas.row(seg));
        Matrix emp(3, 3);
        std::size_t count = 0;
        for (std::size_t i = seg; i < n; i += 2) {
            ++count;
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 3; ++b) emp(a, b) += z(i, a) * z(i, b);
        }
        for (std::size_t k = 0; k < emp.size(); ++k) emp.data()[k] /= count;
        CHECK(max_abs_diff(emp, expect) < 0.03);
    }
}

TEST_CASE("build_mixing yields invertible square nets", "[datagen]") {
    Rng rng(10);
    const MlpNet single = build_mixing(4, 1, rng);
    CHECK(single.num_layers() == 1);
    CHECK(numerical_rank(single.weights[0], 1e-10) == 4);

    const MlpNet deep = build_mixing(5, 4, rng);
    Rng probe_rng(11);
    const JacobianProbeReport probe = jacobian_rank_probe(deep, 100, probe_rng);
    CHECK(probe.min_rank == 5);

    for (const Matrix& w : deep.weights) {
        const SvdResult s = svd(w);
        CHECK(s.singular_values.front() / s.singular_values.back() < 1e6);
    }
}

TEST_CASE("invert_mixing inverts exactly", "[datagen]") {
    // scalar LeakyReLU inverse: h(-3) = -0.3, h^-1(-0.3) = -3
    Rng rng(12);
    const MlpNet net = build_mixing(1, 2, rng);
    const Vector out = forward(net, Vector{-3.0}).output;
    const Vector back = invert_mixing(net, out);
    CHECK(back[0] == Catch::Approx(-3.0).margin(1e-12));

    const MlpNet lin = build_mixing(4, 1, rng);
    const Vector x{0.5, -1.0, 2.0, 0.1};
    CHECK(testutil::max_abs_diff(invert_mixing(lin, forward(lin, x).output), x) < 1e-10);

    const MlpNet deep = build_mixing(5, 4, rng);
    Rng zr(13);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Vector z = zr.normal_vector(5);
        const Vector round = invert_mixing(deep, forward(deep, z).output);
        worst = std::max(worst, testutil::max_abs_diff(round, z));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("generate_dataset shape, determinism and round trip", "[datagen]") {
    ImcaConfig cfg;
    cfg.d = 5;
    cfg.segments = 8;
    cfg.n_per_segment = 100;
    cfg.mixing_layers = 4;
    cfg.mode = LatentModel::ica;
    cfg.seed = 14;

    auto [data, truth] = generate_dataset(cfg);
    CHECK(data.size() == 800);
    CHECK(data.dim() == 5);
    data.validate();

    auto [data2, truth2] = generate_dataset(cfg);
    CHECK(data.x == data2.x);
    CHECK(truth.z == truth2.z);

    double worst = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Vector z = invert_mixing(truth.mixing, data.x.row(i));
        worst = std::max(worst, testutil::max_abs_diff(z, truth.z.row(i)));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("linear ica observations have the closed-form covariance", "[datagen]") {
    ImcaConfig cfg;
    cfg.d = 3;
    cfg.segments = 2;
    cfg.n_per_segment = 60000;
    cfg.mixing_layers = 1;
    cfg.mode = LatentModel::ica;
    cfg.seed = 15;
    auto [data, truth] = generate_dataset(cfg);

    // single linear layer with zero bias: x = Wz in the positive-slope region
    // only if no activation; L=1 has no hidden activation at all
    const Matrix& w = truth.mixing.weights[0];
    for (std::size_t seg = 0; seg < 2; ++seg) {
        Matrix dinv(3, 3);
        for (std::size_t j = 0; j < 3; ++j) dinv(j, j) = 1.0 / truth.lambdas(seg, j);
        const Matrix expect = matmul(w, matmul(dinv, transpose(w)));
        Matrix emp(3, 3);
        std::size_t count = 0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (data.y[i] != seg) continue;
            ++count;
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 3; ++b) emp(a, b) += data.x(i, a) * data.x(i, b);
        }
        for (std::size_t k = 0; k < emp.size(); ++k) emp.data()[k] /= count;
        CHECK(max_abs_diff(emp, expect) < 0.05);
    }
}

TEST_CASE("imca mode produces dependent latents, ica mode independent", "[datagen]") {
    ImcaConfig cfg;
    cfg.d = 4;
    cfg.segments = 4;
    cfg.n_per_segment = 25000;
    cfg.mixing_layers = 1;
    cfg.seed = 16;

    cfg.mode = LatentModel::imca;
    auto [data_imca, truth_imca] = generate_dataset(cfg);
    double max_offdiag = 0.0;
    for (std::size_t seg = 0; seg < cfg.segments; ++seg) {
        const LabeledDataset sub = [&] {
            LabeledDataset s;
            s.num_segments = cfg.segments;
            const auto rows = [&] {
                std::vector<std::size_t> r;
                for (std::size_t i = 0; i < truth_imca.y.size(); ++i)
                    if (truth_imca.y[i] == seg) r.push_back(i);
                return r;
            }();
            s.x = Matrix(rows.size(), cfg.d);
            for (std::size_t i = 0; i < rows.size(); ++i)
                s.x.set_row(i, truth_imca.z.row(rows[i]));
            s.y.assign(rows.size(), seg);
            return s;
        }();
        const Matrix corr = pearson_abs_corr(sub.x, sub.x);
        for (std::size_t a = 0; a < cfg.d; ++a)
            for (std::size_t b = a + 1; b < cfg.d; ++b)
                max_offdiag = std::max(max_offdiag, corr(a, b));
    }
    CHECK(max_offdiag > 0.1);

    cfg.mode = LatentModel::ica;
    auto [data_ica, truth_ica] = generate_dataset(cfg);
    double max_ica = 0.0;
    for (std::size_t seg = 0; seg < cfg.segments; ++seg) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < truth_ica.y.size(); ++i)
            if (truth_ica.y[i] == seg) rows.push_back(i);
        Matrix zs(rows.size(), cfg.d);
        for (std::size_t i = 0; i < rows.size(); ++i) zs.set_row(i, truth_ica.z.row(rows[i]));
        const Matrix corr = pearson_abs_corr(zs, zs);
        for (std::size_t a = 0; a < cfg.d; ++a)
            for (std::size_t b = a + 1; b < cfg.d; ++b) max_ica = std::max(max_ica, corr(a, b));
    }
    CHECK(max_ica < 0.02);
}

TEST_CASE("config validation", "[datagen]") {
    ImcaConfig cfg;
    cfg.d = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.d = 5;
    cfg.segments = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.segments = 8;
    cfg.lambda_lo = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
