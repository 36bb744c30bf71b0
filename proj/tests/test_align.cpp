#include "vitdec/align.hpp"
#include "vitdec/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace vitdec;

namespace {

AlignData identity_task(int n, int N, int d, Rng& rng, double noise = 0.0) {
    AlignData data;
    data.targets = Eigen::MatrixXd::Zero(n, d);
    for (int k = 0; k < N; ++k) {
        Eigen::MatrixXd c(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) c(i, j) = rng.gaussian_d();
        data.contribs.push_back(c);
        data.targets += c;
    }
    if (noise > 0.0)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) data.targets(i, j) += rng.gaussian_d(0.0, noise);
    return data;
}

/// Hidden scaled-orthogonal maps: targets = sum_k R_k c_k (+ noise).
AlignData rotation_task(int n, int N, int d, int d_ref, Rng& rng,
                        std::vector<Eigen::MatrixXd>* truth = nullptr, double noise = 0.0) {
    AlignData data;
    data.targets = Eigen::MatrixXd::Zero(n, d_ref);
    for (int k = 0; k < N; ++k) {
        Eigen::MatrixXd c(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) c(i, j) = rng.gaussian_d();
        Eigen::MatrixXd r = random_orthogonal(d_ref, d, rng);
        data.targets += c * r.transpose();
        data.contribs.push_back(std::move(c));
        if (truth) truth->push_back(std::move(r));
    }
    if (noise > 0.0)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d_ref; ++j) data.targets(i, j) += rng.gaussian_d(0.0, noise);
    return data;
}

std::vector<int> all_rows(const AlignData& data) {
    std::vector<int> rows(static_cast<size_t>(data.images()));
    std::iota(rows.begin(), rows.end(), 0);
    return rows;
}

} // namespace

TEST_CASE("align_loss: identity maps on a perfectly aligned batch") {
    Rng rng(60);
    const int d = 8, N = 3;
    AlignData data = identity_task(16, N, d, rng);
    std::vector<Eigen::MatrixXd> maps(N, Eigen::MatrixXd::Identity(d, d));
    CHECK(align_loss(maps, data, all_rows(data), 0.0) <= 1e-12);
    // identity is orthogonal, so the penalty adds nothing
    CHECK(align_loss(maps, data, all_rows(data), 0.5) <= 1e-12);
}

TEST_CASE("align_loss: penalty has the closed form ||k^2 I - I||_F") {
    Rng rng(61);
    const int d = 9;
    AlignData data;
    Eigen::MatrixXd c(4, d);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < d; ++j) c(i, j) = rng.gaussian_d();
    data.contribs.push_back(c);
    data.targets = 2.0 * c; // cosine term vanishes for f = 2I
    std::vector<Eigen::MatrixXd> maps{2.0 * Eigen::MatrixXd::Identity(d, d)};
    double lambda = 0.7;
    double expect = lambda * 3.0 * std::sqrt(static_cast<double>(d)); // ||4I - I||_F = 3 sqrt(d)
    CHECK(align_loss(maps, data, all_rows(data), lambda) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("align_loss skips zero-norm aligned sums and counts them") {
    const int d = 4;
    AlignData data;
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(3, d);
    c(1, 0) = 1.0; // only row 1 is usable
    data.contribs.push_back(c);
    data.targets = Eigen::MatrixXd::Ones(3, d);
    std::vector<Eigen::MatrixXd> maps{Eigen::MatrixXd::Identity(d, d)};
    int skipped = 0;
    double loss = align_loss(maps, data, all_rows(data), 0.0, nullptr, &skipped);
    CHECK(skipped == 2);
    CHECK(loss == doctest::Approx(1.0 - 1.0 / std::sqrt(4.0)));
}

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(62);
    const int d = 8, N = 3, n = 12;
    AlignData data = rotation_task(n, N, d, d, rng, nullptr, 0.05);
    std::vector<Eigen::MatrixXd> maps;
    for (int k = 0; k < N; ++k) maps.push_back(random_orthogonal(d, d, rng) * 1.1);

    const double lambda = 0.25;
    std::vector<Eigen::MatrixXd> grads;
    std::vector<int> rows = all_rows(data);
    align_loss(maps, data, rows, lambda, &grads);

    const double h = 1e-5;
    double worst = 0.0;
    for (int k = 0; k < N; ++k) {
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) {
                std::vector<Eigen::MatrixXd> up = maps, dn = maps;
                up[static_cast<size_t>(k)](r, c) += h;
                dn[static_cast<size_t>(k)](r, c) -= h;
                double fd =
                    (align_loss(up, data, rows, lambda) - align_loss(dn, data, rows, lambda)) / (2 * h);
                double g = grads[static_cast<size_t>(k)](r, c);
                double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6});
                worst = std::max(worst, rel);
            }
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("training recovers hidden orthogonal maps (small instance)") {
    Rng rng(63);
    std::vector<Eigen::MatrixXd> truth;
    AlignData data = rotation_task(400, 3, 8, 8, rng, &truth);
    AlignTrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.lr_decay = 0.99;
    cfg.lambda = 0.005;
    cfg.epochs = 100;
    cfg.seed = 5;
    Aligner aligner = train_compalign(data, nullptr, cfg, {});
    CHECK(aligner.log.final_train_cos <= 0.02);
    for (const OrthogonalityRow& row : orthogonality_report(aligner))
        CHECK(row.relative_scaled <= 0.1);
}

TEST_CASE("training is deterministic given the seed") {
    Rng rng(64);
    AlignData data = rotation_task(80, 2, 6, 6, rng);
    AlignTrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = 77;
    Aligner a = train_compalign(data, nullptr, cfg, {});
    Aligner b = train_compalign(data, nullptr, cfg, {});
    REQUIRE(a.log.loss_curve.size() == b.log.loss_curve.size());
    for (size_t i = 0; i < a.log.loss_curve.size(); ++i)
        CHECK(a.log.loss_curve[i] == b.log.loss_curve[i]);
}

TEST_CASE("single-map tying is vacuous for one component") {
    Rng rng(65);
    AlignData data = rotation_task(60, 1, 6, 6, rng);
    AlignTrainConfig cfg;
    cfg.epochs = 8;
    cfg.seed = 3;
    Aligner untied = train_compalign(data, nullptr, cfg, {});
    Aligner tied = single_map_baseline(data, nullptr, cfg, {});
    REQUIRE(untied.maps.size() == 1);
    REQUIRE(tied.maps.size() == 1);
    CHECK((untied.maps[0] - tied.maps[0]).norm() <= 1e-12);
}

TEST_CASE("distinct hidden rotations favour untied maps over one shared map") {
    double untied_total = 0.0, tied_total = 0.0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(900 + seed);
        AlignData data = rotation_task(300, 3, 8, 8, rng);
        AlignTrainConfig cfg;
        cfg.learning_rate = 1e-2;
        cfg.lr_decay = 0.99;
        cfg.lambda = 0.005;
        cfg.epochs = 40;
        cfg.seed = seed;
        untied_total += train_compalign(data, nullptr, cfg, {}).log.final_train_cos;
        tied_total += single_map_baseline(data, nullptr, cfg, {}).log.final_train_cos;
    }
    CHECK(untied_total < tied_total);
}

TEST_CASE("dropping the penalty fits the training set at least as well") {
    double with_total = 0.0, without_total = 0.0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(910 + seed);
        AlignData data = rotation_task(300, 3, 8, 8, rng, nullptr, 0.3);
        AlignTrainConfig cfg;
        cfg.learning_rate = 1e-2;
        cfg.epochs = 50;
        cfg.seed = seed;
        with_total += train_compalign(data, nullptr, cfg, {}).log.final_train_cos;
        AlignTrainConfig free = cfg;
        free.lambda = 0.0;
        without_total += train_compalign(data, nullptr, free, {}).log.final_train_cos;
    }
    CHECK(without_total <= with_total);
}

TEST_CASE("the no-penalty flag removes the regularizer from the objective") {
    Rng rng(66);
    AlignData data = rotation_task(40, 2, 6, 6, rng);
    AlignTrainConfig cfg;
    cfg.epochs = 4;
    cfg.use_penalty = false;
    Aligner aligner = single_map_baseline(data, nullptr, cfg, {});
    CHECK(aligner.lambda == 0.0);
    // with lambda = 0 the logged objective is exactly the cosine trace
    for (size_t e = 0; e < aligner.log.loss_curve.size(); ++e)
        CHECK(aligner.log.loss_curve[e] >= -1e-12);
}

TEST_CASE("orthogonality report closed forms") {
    Rng rng(67);
    const int d = 16;
    Aligner aligner;
    aligner.d = d;
    aligner.d_ref = d;
    aligner.maps.push_back(random_orthogonal(d, d, rng));
    aligner.maps.push_back(3.0 * random_orthogonal(d, d, rng));
    Eigen::MatrixXd g(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) g(i, j) = rng.gaussian_d();
    aligner.maps.push_back(g);

    std::vector<OrthogonalityRow> rows = orthogonality_report(aligner);
    CHECK(rows[0].deviation_identity <= 1e-9);
    CHECK(rows[0].best_k == doctest::Approx(1.0));
    CHECK(rows[1].deviation_identity == doctest::Approx(8.0 * std::sqrt(static_cast<double>(d))));
    CHECK(rows[1].best_k == doctest::Approx(9.0));
    CHECK(rows[1].deviation_scaled <= 1e-8);
    CHECK(rows[2].deviation_identity > 0.1);
}

TEST_CASE("rank ordering: scaled orthogonal maps never violate, skew maps do") {
    Rng rng(68);
    const int d = 32;
    Eigen::MatrixXd q = 2.5 * random_orthogonal(d, d, rng);
    CHECK(rank_ordering_violations(q, 10000, 1e-6, rng) == 0);

    Eigen::MatrixXd skew = Eigen::MatrixXd::Zero(2, 2);
    skew(0, 0) = 1.0;
    skew(1, 1) = 10.0;
    CHECK(rank_ordering_violations(skew, 2000, 1e-6, rng) >= 1);

    Eigen::MatrixXd qi = random_orthogonal(d, d, rng);
    Eigen::MatrixXd qj = 2.0 * random_orthogonal(d, d, rng);
    CHECK(rank_ordering_violations(qi, qj, 2000, 1e-6, rng) >= 1);
    // equal scalars keep the inter-component condition intact
    Eigen::MatrixXd qk = random_orthogonal(d, d, rng);
    CHECK(rank_ordering_violations(qi, qk, 2000, 1e-6, rng) == 0);
}

TEST_CASE("scaled orthogonal maps preserve cosines") {
    Rng rng(69);
    const int d = 24;
    Eigen::MatrixXd f = 1.7 * random_orthogonal(d, d, rng);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::VectorXd u(d), v(d);
        for (int j = 0; j < d; ++j) {
            u[j] = rng.gaussian_d();
            v[j] = rng.gaussian_d();
        }
        double cos_raw = u.dot(v) / (u.norm() * v.norm());
        Eigen::VectorXd fu = f * u, fv = f * v;
        double cos_mapped = fu.dot(fv) / (fu.norm() * fv.norm());
        CHECK(std::abs(cos_raw - cos_mapped) <= 1e-6);
    }
}

TEST_CASE("degenerate corpora are rejected") {
    AlignData empty;
    std::vector<Eigen::MatrixXd> maps;
    CHECK_THROWS_AS(align_loss(maps, empty, {}, 0.0), ValidationError);

    Rng rng(70);
    AlignData data = rotation_task(10, 2, 4, 4, rng);
    AlignTrainConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(train_compalign(data, nullptr, cfg, {}), ValidationError);
}
