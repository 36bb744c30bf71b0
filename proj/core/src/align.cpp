#include "vitdec/align.hpp"

#include "vitdec/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitdec {

namespace {
constexpr double kZeroNorm = 1e-8;
constexpr double kPenaltyKink = 1e-12;
} // namespace

void AlignData::validate() const {
    if (contribs.empty()) throw ValidationError("align data: no components");
    const int n = images();
    const auto d = contribs[0].cols();
    for (const Eigen::MatrixXd& c : contribs) {
        if (c.rows() != n) throw ValidationError("align data: contribution row count mismatch");
        if (c.cols() != d) throw ValidationError("align data: contribution width mismatch");
    }
}

Eigen::VectorXd Aligner::apply_sum(const AlignData& data, int row) const {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(d_ref);
    for (size_t k = 0; k < maps.size(); ++k) s += maps[k] * data.contribs[k].row(row).transpose();
    return s;
}

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double na = a.norm(), nb = b.norm();
    if (na < kZeroNorm || nb < kZeroNorm) throw ValidationError("cosine_distance: zero-norm operand");
    return 1.0 - a.dot(b) / (na * nb);
}

double align_loss(const std::vector<Eigen::MatrixXd>& maps, const AlignData& data,
                  const std::vector<int>& rows, double lambda,
                  std::vector<Eigen::MatrixXd>* grads, int* skipped, bool tie_maps) {
    data.validate();
    if (maps.size() != data.contribs.size())
        throw ValidationError("align_loss: map count does not match component count");
    const int N = static_cast<int>(maps.size());
    if (grads)
        grads->assign(static_cast<size_t>(N), Eigen::MatrixXd::Zero(maps[0].rows(), maps[0].cols()));

    double cos_term = 0.0;
    int used = 0, skip = 0;
    for (int row : rows) {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(maps[0].rows());
        for (int k = 0; k < N; ++k)
            s.noalias() += maps[static_cast<size_t>(k)] * data.contribs[static_cast<size_t>(k)].row(row).transpose();
        const Eigen::VectorXd t = data.targets.row(row).transpose();
        const double ns = s.norm(), nt = t.norm();
        if (ns < kZeroNorm || nt < kZeroNorm) {
            ++skip; // cosine undefined for this sample
            continue;
        }
        const double c = s.dot(t) / (ns * nt);
        cos_term += 1.0 - c;
        ++used;
        if (grads) {
            // d(1 - cos)/ds = -(t/(|s||t|) - (s.t) s / (|s|^3 |t|))
            Eigen::VectorXd ds = -(t / (ns * nt) - s.dot(t) * s / (ns * ns * ns * nt));
            for (int k = 0; k < N; ++k)
                (*grads)[static_cast<size_t>(k)].noalias() += ds * data.contribs[static_cast<size_t>(k)].row(row);
        }
    }
    if (used > 0) {
        cos_term /= static_cast<double>(used);
        if (grads)
            for (Eigen::MatrixXd& g : *grads) g /= static_cast<double>(used);
    }
    if (skipped) *skipped = skip;

    if (grads && tie_maps) {
        // tied maps: every slot sees the total cosine-term gradient
        Eigen::MatrixXd total = Eigen::MatrixXd::Zero(maps[0].rows(), maps[0].cols());
        for (const Eigen::MatrixXd& g : *grads) total += g;
        for (Eigen::MatrixXd& g : *grads) g = total;
    }

    double penalty = 0.0;
    if (lambda != 0.0) {
        const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(maps[0].cols(), maps[0].cols());
        const int upto = tie_maps ? 1 : N;
        for (int k = 0; k < upto; ++k) {
            const Eigen::MatrixXd& f = maps[static_cast<size_t>(k)];
            Eigen::MatrixXd gram = f.transpose() * f - eye;
            double fro = gram.norm();
            penalty += fro;
            if (grads && fro > kPenaltyKink) {
                Eigen::MatrixXd pg = lambda * (2.0 * f * gram) / fro;
                if (tie_maps)
                    for (Eigen::MatrixXd& g : *grads) g += pg;
                else
                    (*grads)[static_cast<size_t>(k)] += pg;
            }
        }
    }
    return cos_term + lambda * penalty;
}

double mean_cosine_distance(const std::vector<Eigen::MatrixXd>& maps, const AlignData& data,
                            int* skipped) {
    std::vector<int> rows(static_cast<size_t>(data.images()));
    std::iota(rows.begin(), rows.end(), 0);
    return align_loss(maps, data, rows, 0.0, nullptr, skipped);
}

namespace {

Aligner train_impl(const AlignData& train, const AlignData* val, const AlignTrainConfig& cfg,
                   const std::vector<std::string>& component_labels, bool tie_maps) {
    train.validate();
    const int N = train.components();
    const int d = static_cast<int>(train.contribs[0].cols());
    const int d_ref = static_cast<int>(train.targets.cols());
    if (!component_labels.empty() && static_cast<int>(component_labels.size()) != N)
        throw ValidationError("train_compalign: component label count mismatch");
    if (cfg.learning_rate <= 0) throw ValidationError("train_compalign: learning_rate must be > 0");

    Aligner aligner;
    aligner.component_labels = component_labels;
    aligner.d = d;
    aligner.d_ref = d_ref;
    aligner.single_map = tie_maps;
    aligner.seed = cfg.seed;
    aligner.lambda = cfg.resolved_lambda(d_ref);

    Rng rng(Rng::mix(cfg.seed, 0xa119));
    // start near orthogonal so the penalty term begins at ~0
    if (tie_maps) {
        Eigen::MatrixXd shared = random_orthogonal(d_ref, d, rng);
        aligner.maps.assign(static_cast<size_t>(N), shared);
    } else {
        for (int k = 0; k < N; ++k) aligner.maps.push_back(random_orthogonal(d_ref, d, rng));
    }

    std::vector<Eigen::MatrixXd> m(static_cast<size_t>(N), Eigen::MatrixXd::Zero(d_ref, d));
    std::vector<Eigen::MatrixXd> v(static_cast<size_t>(N), Eigen::MatrixXd::Zero(d_ref, d));
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    int step = 0;

    std::vector<int> order(static_cast<size_t>(train.images()));
    std::iota(order.begin(), order.end(), 0);

    double lr = cfg.learning_rate;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0) lr *= cfg.lr_decay;
        std::shuffle(order.begin(), order.end(), rng.engine());
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            std::vector<int> rows(order.begin() + static_cast<long>(start),
                                  order.begin() + static_cast<long>(end));
            std::vector<Eigen::MatrixXd> grads;
            int skip = 0;
            double loss = align_loss(aligner.maps, train, rows, aligner.lambda, &grads, &skip, tie_maps);
            aligner.log.skipped_samples += skip;
            if (!std::isfinite(loss))
                throw NumericError("train_compalign: non-finite loss at epoch " + std::to_string(epoch));
            epoch_loss += loss;
            ++batches;
            ++step;
            const double bc1 = 1.0 - std::pow(b1, step);
            const double bc2 = 1.0 - std::pow(b2, step);
            const int upto = tie_maps ? 1 : N;
            for (int k = 0; k < upto; ++k) {
                Eigen::MatrixXd& mk = m[static_cast<size_t>(k)];
                Eigen::MatrixXd& vk = v[static_cast<size_t>(k)];
                mk = b1 * mk + (1.0 - b1) * grads[static_cast<size_t>(k)];
                vk = (b2 * vk.array() + (1.0 - b2) * grads[static_cast<size_t>(k)].array().square()).matrix();
                Eigen::ArrayXXd update = (mk / bc1).array() / ((vk / bc2).array().sqrt() + eps);
                aligner.maps[static_cast<size_t>(k)] -= lr * update.matrix();
            }
            if (tie_maps)
                for (int k = 1; k < N; ++k) aligner.maps[static_cast<size_t>(k)] = aligner.maps[0];
        }
        aligner.log.loss_curve.push_back(epoch_loss / std::max(1, batches));
        aligner.log.cos_curve.push_back(mean_cosine_distance(aligner.maps, train));
    }
    aligner.log.final_train_cos = mean_cosine_distance(aligner.maps, train);
    if (val) aligner.log.final_val_cos = mean_cosine_distance(aligner.maps, *val);
    return aligner;
}

} // namespace

Aligner train_compalign(const AlignData& train, const AlignData* val, const AlignTrainConfig& cfg,
                        const std::vector<std::string>& component_labels) {
    return train_impl(train, val, cfg, component_labels, cfg.single_map);
}

Aligner single_map_baseline(const AlignData& train, const AlignData* val, const AlignTrainConfig& cfg,
                            const std::vector<std::string>& component_labels) {
    return train_impl(train, val, cfg, component_labels, true);
}

std::vector<OrthogonalityRow> orthogonality_report(const Aligner& aligner) {
    std::vector<OrthogonalityRow> rows;
    for (size_t k = 0; k < aligner.maps.size(); ++k) {
        const Eigen::MatrixXd& f = aligner.maps[k];
        const int d = static_cast<int>(f.cols());
        Eigen::MatrixXd gram = f.transpose() * f;
        const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
        OrthogonalityRow row;
        row.component =
            k < aligner.component_labels.size() ? aligner.component_labels[k] : "f" + std::to_string(k);
        row.deviation_identity = (gram - eye).norm();
        row.best_k = gram.trace() / static_cast<double>(d); // argmin_k ||G - kI||_F
        row.deviation_scaled = (gram - row.best_k * eye).norm();
        double denom = std::abs(row.best_k) * std::sqrt(static_cast<double>(d));
        row.relative_scaled = denom > 0 ? row.deviation_scaled / denom : row.deviation_scaled;
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

Eigen::VectorXd gaussian_vector(int d, Rng& rng) {
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v[i] = rng.gaussian_d();
    return v;
}

} // namespace

namespace {

int violations_directed(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb, int trials, double tol,
                        Rng& rng) {
    if (trials < 1) throw ValidationError("rank_ordering_violations: trials must be >= 1");
    int violations = 0;
    const int d = static_cast<int>(fa.cols());
    for (int t = 0; t < trials; ++t) {
        Eigen::VectorXd u = gaussian_vector(d, rng);
        Eigen::VectorXd v = gaussian_vector(d, rng);
        if (u.norm() > v.norm()) std::swap(u, v); // enforce ||u|| <= ||v||
        if ((fa * u).norm() > (fb * v).norm() + tol) ++violations;
    }
    return violations;
}

} // namespace

int rank_ordering_violations(const Eigen::MatrixXd& f, int trials, double tol, Rng& rng) {
    return violations_directed(f, f, trials, tol, rng);
}

int rank_ordering_violations(const Eigen::MatrixXd& fi, const Eigen::MatrixXd& fj, int trials,
                             double tol, Rng& rng) {
    // the condition is symmetric in the map pair, so probe both assignments
    int half = trials / 2 + trials % 2;
    return violations_directed(fi, fj, half, tol, rng) + violations_directed(fj, fi, trials / 2, tol, rng);
}

Eigen::MatrixXd random_orthogonal(int rows, int cols, Rng& rng) {
    Eigen::MatrixXd g(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) g(i, j) = rng.gaussian_d();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
    Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(cols, cols).triangularView<Eigen::Upper>();
    for (int j = 0; j < cols; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q;
}

} // namespace vitdec
