#include "vitdec/attribution.hpp"

#include "vitdec/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitdec {

void FeatureSpec::validate() const {
    if (embeddings.rows() < 1) throw ValidationError("feature spec '" + name + "': no instantiations");
    for (int r = 0; r < embeddings.rows(); ++r)
        if (embeddings.row(r).norm() < 1e-12)
            throw ValidationError("feature spec '" + name + "': zero instantiation row " + std::to_string(r));
    if (!instantiations.empty() && static_cast<int>(instantiations.size()) != embeddings.rows())
        throw ValidationError("feature spec '" + name + "': label/embedding count mismatch");
}

int ScoreMatrix::feature_index(const std::string& name) const {
    for (size_t i = 0; i < feature_names.size(); ++i)
        if (feature_names[i] == name) return static_cast<int>(i);
    throw ValidationError("score matrix: unknown feature '" + name + "'");
}

Eigen::MatrixXd orthogonalize(const Eigen::MatrixXd& b, double tol) {
    std::vector<Eigen::VectorXd> basis;
    for (int r = 0; r < b.rows(); ++r) {
        Eigen::VectorXd v = b.row(r).transpose();
        for (const Eigen::VectorXd& q : basis) v -= q.dot(v) * q;
        double n = v.norm();
        if (n < tol) continue; // rank-deficient row, drop
        basis.push_back(v / n);
    }
    if (basis.empty()) throw ValidationError("orthogonalize: all rows degenerate");
    Eigen::MatrixXd out(static_cast<int>(basis.size()), b.cols());
    for (size_t i = 0; i < basis.size(); ++i) out.row(static_cast<int>(i)) = basis[i].transpose();
    return out;
}

namespace {

/// Pearson correlation of two equal-length columns; returns false when
/// either side has (numerically) zero variance.
bool pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double* out) {
    const int n = static_cast<int>(a.size());
    const double ma = a.mean(), mb = b.mean();
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (int i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa < 1e-24 || sbb < 1e-24) return false;
    *out = sab / std::sqrt(saa * sbb);
    return true;
}

} // namespace

double comp_attribute(const Eigen::MatrixXd& c, const Eigen::MatrixXd& z, const Eigen::MatrixXd& b,
                      bool* flagged_out) {
    if (c.rows() != z.rows()) throw ValidationError("comp_attribute: C and Z row mismatch");
    if (c.rows() < 3) throw ValidationError("comp_attribute: needs at least 3 images");
    Eigen::MatrixXd basis = orthogonalize(b);
    Eigen::MatrixXd sz = z * basis.transpose(); // n x k'
    Eigen::MatrixXd sc = c * basis.transpose();
    bool flagged = false;
    double acc = 0.0;
    for (int j = 0; j < basis.rows(); ++j) {
        double r = 0.0;
        if (pearson(sz.col(j), sc.col(j), &r)) {
            acc += r;
        } else {
            flagged = true; // zero-variance column scores 0
        }
    }
    if (flagged_out) *flagged_out = flagged;
    return acc / static_cast<double>(basis.rows());
}

ScoreMatrix score_matrix(const std::vector<Eigen::MatrixXd>& aligned_contribs,
                         const std::vector<std::string>& component_labels,
                         const std::vector<FeatureSpec>& features) {
    if (aligned_contribs.empty()) throw ValidationError("score_matrix: no components");
    if (component_labels.size() != aligned_contribs.size())
        throw ValidationError("score_matrix: label count mismatch");
    for (const FeatureSpec& f : features) f.validate();

    Eigen::MatrixXd z = aligned_contribs[0];
    for (size_t k = 1; k < aligned_contribs.size(); ++k) {
        if (aligned_contribs[k].rows() != z.rows() || aligned_contribs[k].cols() != z.cols())
            throw ValidationError("score_matrix: contribution shape mismatch");
        z += aligned_contribs[k];
    }

    ScoreMatrix s;
    s.component_labels = component_labels;
    s.n_images = static_cast<int>(z.rows());
    s.scores.resize(static_cast<int>(aligned_contribs.size()), static_cast<int>(features.size()));
    s.degenerate.assign(aligned_contribs.size() * features.size(), 0);
    for (const FeatureSpec& f : features) s.feature_names.push_back(f.name);

    for (size_t i = 0; i < aligned_contribs.size(); ++i)
        for (size_t p = 0; p < features.size(); ++p) {
            bool flagged = false;
            double v = comp_attribute(aligned_contribs[i], z, features[p].embeddings, &flagged);
            s.scores(static_cast<int>(i), static_cast<int>(p)) = v;
            s.degenerate[i * features.size() + p] = flagged ? 1 : 0;
        }
    return s;
}

Eigen::MatrixXd cosine_proxy_scores(const std::vector<Eigen::MatrixXd>& aligned_contribs,
                                    const Eigen::MatrixXd& z_ref,
                                    const std::vector<FeatureSpec>& features) {
    if (aligned_contribs.empty()) throw ValidationError("cosine_proxy_scores: no components");
    const int n = static_cast<int>(z_ref.rows());
    Eigen::MatrixXd out(static_cast<int>(aligned_contribs.size()), static_cast<int>(features.size()));
    for (size_t i = 0; i < aligned_contribs.size(); ++i) {
        const Eigen::MatrixXd& c = aligned_contribs[i];
        if (c.rows() != n) throw ValidationError("cosine_proxy_scores: row mismatch");
        for (size_t p = 0; p < features.size(); ++p) {
            const Eigen::MatrixXd& b = features[p].embeddings;
            double acc = 0.0;
            int used = 0;
            for (int s = 0; s < b.rows(); ++s) {
                Eigen::VectorXd y = b.row(s).transpose();
                Eigen::VectorXd sim_c(n), sim_ref(n);
                for (int img = 0; img < n; ++img) {
                    double nc = c.row(img).norm(), nr = z_ref.row(img).norm(), ny = y.norm();
                    sim_c[img] = nc < 1e-12 ? 0.0 : c.row(img).dot(y.transpose()) / (nc * ny);
                    sim_ref[img] = nr < 1e-12 ? 0.0 : z_ref.row(img).dot(y.transpose()) / (nr * ny);
                }
                double r = 0.0;
                if (pearson(sim_ref, sim_c, &r)) {
                    acc += r;
                    ++used;
                }
            }
            out(static_cast<int>(i), static_cast<int>(p)) = used > 0 ? acc / used : 0.0;
        }
    }
    return out;
}

namespace {

std::vector<int> ordering_of(const Eigen::VectorXd& column) {
    std::vector<int> idx(static_cast<size_t>(column.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return column[a] > column[b]; });
    return idx;
}

} // namespace

std::vector<int> component_ordering(const ScoreMatrix& s, int feature) {
    if (feature < 0 || feature >= s.features()) throw ValidationError("component_ordering: bad feature");
    return ordering_of(s.scores.col(feature));
}

std::vector<int> feature_ordering(const ScoreMatrix& s, int component) {
    if (component < 0 || component >= s.components())
        throw ValidationError("feature_ordering: bad component");
    return ordering_of(s.scores.row(component).transpose());
}

std::vector<int> select_by_gap(const ScoreMatrix& s, int feature, int k, int contrast) {
    if (feature < 0 || feature >= s.features()) throw ValidationError("select_by_gap: bad feature");
    if (s.features() < 2) throw ValidationError("select_by_gap: needs at least two features");
    if (k < 0 || k > s.components())
        throw ValidationError("select_by_gap: k exceeds component count");
    if (contrast >= s.features()) throw ValidationError("select_by_gap: bad contrast feature");
    Eigen::VectorXd gap(s.components());
    for (int i = 0; i < s.components(); ++i) {
        double worst = std::numeric_limits<double>::infinity();
        for (int p = 0; p < s.features(); ++p) {
            if (p == feature) continue;
            if (contrast >= 0 && p != contrast) continue;
            worst = std::min(worst, s.scores(i, feature) - s.scores(i, p));
        }
        gap[i] = worst;
    }
    std::vector<int> idx = ordering_of(gap);
    idx.resize(static_cast<size_t>(k));
    return idx;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[static_cast<size_t>(a)] < v[static_cast<size_t>(b)]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[static_cast<size_t>(idx[j + 1])] == v[static_cast<size_t>(idx[i])]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t t = i; t <= j; ++t) ranks[static_cast<size_t>(idx[t])] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ValidationError("spearman: length mismatch");
    if (a.size() < 2) throw ValidationError("spearman: needs at least two items");
    std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
    Eigen::Map<Eigen::VectorXd> va(ra.data(), static_cast<int>(ra.size()));
    Eigen::Map<Eigen::VectorXd> vb(rb.data(), static_cast<int>(rb.size()));
    double r = 0.0;
    if (!pearson(va, vb, &r))
        throw ValidationError("spearman: constant ranking");
    return r;
}

} // namespace vitdec
