#include "vitdec/applications.hpp"

#include "vitdec/errors.hpp"
#include "vitdec/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace vitdec {

DecompositionSet decompose_dataset(const ToyModel& model, const SyntheticDataset& ds,
                                   const std::vector<int>& indices, const DecomposeOptions& opts) {
    std::vector<Decomposition> decs(indices.size());
    parallel_for(static_cast<int>(indices.size()), [&](int i) {
        RecordedForward fwd = forward_record(model, ds.images[static_cast<size_t>(indices[static_cast<size_t>(i)])]);
        decs[static_cast<size_t>(i)] = rep_decompose(*fwd.tape, fwd.z_node, opts);
    });
    DecompositionSet set = DecompositionSet::assemble(decs, indices, opts.tol);
    set.model_id = model.cfg.id();
    return set;
}

std::vector<std::string> component_labels(const DecompositionSet& set) {
    std::vector<std::string> out;
    out.reserve(set.components.size());
    for (const ComponentEntry& e : set.components) out.push_back(e.id.label());
    return out;
}

Eigen::MatrixXd component_matrix(const DecompositionSet& set, int component) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(set.images(), set.d);
    for (int s : set.slots_of(component)) {
        for (int img = 0; img < set.images(); ++img) {
            const float* p = set.contrib_at(img, s);
            for (int j = 0; j < set.d; ++j) out(img, j) += p[j];
        }
    }
    return out;
}

std::vector<Eigen::MatrixXd> aligned_component_matrices(const DecompositionSet& set,
                                                        const Aligner& aligner) {
    if (static_cast<int>(aligner.maps.size()) != static_cast<int>(set.components.size()))
        throw ValidationError("aligner/decomposition component mismatch: " +
                              std::to_string(aligner.maps.size()) + " maps vs " +
                              std::to_string(set.components.size()) + " components");
    if (aligner.d != set.d)
        throw ValidationError("aligner width " + std::to_string(aligner.d) +
                              " does not match decomposition width " + std::to_string(set.d));
    if (!aligner.component_labels.empty()) {
        std::vector<std::string> labels = component_labels(set);
        if (aligner.component_labels != labels)
            throw ValidationError("aligner component table does not match decomposition");
    }
    std::vector<Eigen::MatrixXd> out;
    out.reserve(set.components.size());
    for (size_t k = 0; k < set.components.size(); ++k)
        out.push_back(component_matrix(set, static_cast<int>(k)) * aligner.maps[k].transpose());
    return out;
}

AlignData align_data_from(const DecompositionSet& set, const Eigen::MatrixXd& targets) {
    if (targets.rows() != set.images())
        throw ValidationError("align data: target rows do not match decomposition images");
    AlignData data;
    for (size_t k = 0; k < set.components.size(); ++k)
        data.contribs.push_back(component_matrix(set, static_cast<int>(k)));
    data.targets = targets;
    return data;
}

namespace {

std::vector<int> rank_descending(const std::vector<double>& sims) {
    std::vector<int> idx(sims.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return sims[static_cast<size_t>(a)] > sims[static_cast<size_t>(b)]; });
    return idx;
}

void check_scores_match(const DecompositionSet& set, const ScoreMatrix& scores) {
    if (scores.components() != static_cast<int>(set.components.size()))
        throw ValidationError("score matrix component count does not match decomposition");
    if (!scores.component_labels.empty() && scores.component_labels != component_labels(set))
        throw ValidationError("score matrix component table does not match decomposition");
}

} // namespace

RetrievalResult retrieve_text(const DecompositionSet& set, const Aligner& aligner,
                              const ScoreMatrix& scores, const std::string& feature,
                              const Eigen::VectorXd& u, int k_components, int k_images) {
    check_scores_match(set, scores);
    if (k_components < 1 || k_components > scores.components())
        throw ValidationError("retrieve_text: bad component count");
    const int fidx = scores.feature_index(feature);
    std::vector<int> order = component_ordering(scores, fidx);
    order.resize(static_cast<size_t>(k_components));

    std::vector<Eigen::MatrixXd> aligned = aligned_component_matrices(set, aligner);
    RetrievalResult res;
    res.query = feature;
    for (int c : order) res.components_used.push_back(set.components[static_cast<size_t>(c)].id.label());

    const double nu = u.norm();
    if (nu < 1e-12) throw ValidationError("retrieve_text: zero probe vector");
    std::vector<double> sims(static_cast<size_t>(set.images()), 0.0);
    std::vector<bool> ok(static_cast<size_t>(set.images()), true);
    double max_abs = 0.0;
    for (int img = 0; img < set.images(); ++img) {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(aligner.d_ref);
        for (int c : order) s += aligned[static_cast<size_t>(c)].row(img).transpose();
        double ns = s.norm();
        if (ns < 1e-8) {
            ok[static_cast<size_t>(img)] = false;
            res.excluded.push_back(set.image_ids[static_cast<size_t>(img)]);
            continue;
        }
        sims[static_cast<size_t>(img)] = s.dot(u) / (ns * nu);
        max_abs = std::max(max_abs, std::abs(sims[static_cast<size_t>(img)]));
    }
    res.uninformative = max_abs < 1e-6;
    std::vector<int> ranked = rank_descending(sims);
    for (int pos : ranked) {
        if (!ok[static_cast<size_t>(pos)]) continue;
        if (static_cast<int>(res.image_ids.size()) >= k_images) break;
        res.image_ids.push_back(set.image_ids[static_cast<size_t>(pos)]);
        res.similarities.push_back(sims[static_cast<size_t>(pos)]);
    }
    return res;
}

RetrievalResult retrieve_image(const DecompositionSet& set, const ScoreMatrix& scores,
                               const std::string& feature, int k_components, int reference_pos,
                               int k_images) {
    check_scores_match(set, scores);
    if (reference_pos < 0 || reference_pos >= set.images())
        throw ValidationError("retrieve_image: bad reference image");
    const int fidx = scores.feature_index(feature);
    std::vector<int> chosen = select_by_gap(scores, fidx, k_components);

    RetrievalResult res;
    res.query = "image:" + std::to_string(set.image_ids[static_cast<size_t>(reference_pos)]) + " feature:" + feature;
    for (int c : chosen) res.components_used.push_back(set.components[static_cast<size_t>(c)].id.label());

    // feature-specific representation in model space
    auto zp = [&](int img) {
        Tensor acc({set.d});
        for (int c : chosen) add_into(acc, set.component_vector(img, c));
        return acc;
    };
    Tensor ref = zp(reference_pos);
    double nref = l2_norm(ref);
    if (nref < 1e-12) throw ValidationError("retrieve_image: reference has zero feature representation");

    std::vector<double> sims(static_cast<size_t>(set.images()), -2.0);
    for (int img = 0; img < set.images(); ++img) {
        if (img == reference_pos) continue;
        Tensor z = zp(img);
        double nz = l2_norm(z);
        if (nz < 1e-12) {
            res.excluded.push_back(set.image_ids[static_cast<size_t>(img)]);
            continue;
        }
        sims[static_cast<size_t>(img)] = dot(z, ref) / (nz * nref);
    }
    std::vector<int> ranked = rank_descending(sims);
    for (int pos : ranked) {
        if (pos == reference_pos || sims[static_cast<size_t>(pos)] < -1.5) continue;
        if (static_cast<int>(res.image_ids.size()) >= k_images) break;
        res.image_ids.push_back(set.image_ids[static_cast<size_t>(pos)]);
        res.similarities.push_back(sims[static_cast<size_t>(pos)]);
    }
    return res;
}

double HeatmapImage::total() const {
    double acc = 0.0;
    for (double v : cell) acc += v;
    return acc + cls_score + unmapped;
}

HeatmapImage token_heatmap(const DecompositionSet& set, const Aligner& aligner,
                           const Eigen::VectorXd& u, const std::vector<int>& components,
                           int image_pos) {
    if (set.granularity != Granularity::ComponentToken)
        throw ValidationError("token_heatmap: decomposition lacks token granularity");
    if (image_pos < 0 || image_pos >= set.images()) throw ValidationError("token_heatmap: bad image");
    if (components.empty()) throw ValidationError("token_heatmap: empty component set");
    if (static_cast<int>(aligner.maps.size()) != static_cast<int>(set.components.size()))
        throw ValidationError("token_heatmap: aligner/decomposition component mismatch");

    HeatmapImage map;
    for (int c : components) {
        const ComponentEntry& entry = set.components.at(static_cast<size_t>(c));
        map.components_used.push_back(entry.id.label());
        if (entry.tokens.count == 0) continue;
        if (map.grid == 0) {
            map.grid = entry.tokens.grid;
            map.has_cls = entry.tokens.has_cls;
        } else if (entry.tokens.grid != map.grid) {
            throw ValidationError("token_heatmap: mixed token grids in component set");
        }
    }
    if (map.grid == 0) throw ValidationError("token_heatmap: selected components carry no tokens");
    map.cell.assign(static_cast<size_t>(map.grid) * map.grid, 0.0);

    for (int c : components) {
        const Eigen::MatrixXd& f = aligner.maps[static_cast<size_t>(c)];
        for (int s : set.slots_of(c)) {
            const float* p = set.contrib_at(image_pos, s);
            Eigen::VectorXd vec(set.d);
            for (int j = 0; j < set.d; ++j) vec[j] = p[j];
            double score = u.dot(f * vec);
            int token = set.slots[static_cast<size_t>(s)].token;
            if (token < 0) {
                map.unmapped += score;
            } else if (map.has_cls && token == 0) {
                map.cls_score += score;
            } else {
                int idx = token - (map.has_cls ? 1 : 0);
                map.cell[static_cast<size_t>(idx)] += score;
            }
        }
    }
    for (double v : map.cell) map.bound = std::max(map.bound, std::abs(v));
    return map;
}

void write_heatmap_ppm(const HeatmapImage& map, const std::string& path, int cell_pixels) {
    const int g = map.grid;
    const int px = g * cell_pixels;
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << "P6\n" << px << " " << px << "\n255\n";
        const double bound = map.bound > 0 ? map.bound : 1.0;
        for (int y = 0; y < px; ++y) {
            for (int x = 0; x < px; ++x) {
                double v = map.cell[static_cast<size_t>((y / cell_pixels) * g + (x / cell_pixels))] / bound;
                v = std::clamp(v, -1.0, 1.0);
                // blue (negative) .. white (zero) .. red (positive)
                unsigned char r, gc, b;
                if (v >= 0) {
                    r = 255;
                    gc = static_cast<unsigned char>(255 * (1.0 - v));
                    b = static_cast<unsigned char>(255 * (1.0 - v));
                } else {
                    r = static_cast<unsigned char>(255 * (1.0 + v));
                    gc = static_cast<unsigned char>(255 * (1.0 + v));
                    b = 255;
                }
                out.put(static_cast<char>(r)).put(static_cast<char>(gc)).put(static_cast<char>(b));
            }
        }
    }
    std::filesystem::rename(tmp, path);
}

std::vector<Tensor> mean_ablate(const DecompositionSet& set, const std::vector<int>& components) {
    for (int c : components)
        if (c < 0 || c >= static_cast<int>(set.components.size()))
            throw ValidationError("mean_ablate: unknown component " + std::to_string(c));
    const int n = set.images();
    std::vector<Tensor> out(static_cast<size_t>(n));
    for (int img = 0; img < n; ++img) out[static_cast<size_t>(img)] = set.z_at(img);
    for (int c : components) {
        // dataset-wide mean of this component, fixed image order
        Tensor mean({set.d});
        std::vector<Tensor> per(static_cast<size_t>(n));
        for (int img = 0; img < n; ++img) per[static_cast<size_t>(img)] = set.component_vector(img, c);
        for (int img = 0; img < n; ++img) add_into(mean, per[static_cast<size_t>(img)]);
        for (float& v : mean.data) v /= static_cast<float>(n);
        for (int img = 0; img < n; ++img) {
            Tensor& z = out[static_cast<size_t>(img)];
            const Tensor& ci = per[static_cast<size_t>(img)];
            for (int j = 0; j < set.d; ++j) z.data[static_cast<size_t>(j)] += mean.data[static_cast<size_t>(j)] - ci.data[static_cast<size_t>(j)];
        }
    }
    return out;
}

namespace {

struct AblationGroup {
    std::string label;
    std::vector<int> components;
    bool ends_block = false;
};

std::vector<AblationGroup> layer_groups(const DecompositionSet& set) {
    int max_layer = -1;
    for (const ComponentEntry& e : set.components) max_layer = std::max(max_layer, e.id.layer);
    std::vector<AblationGroup> groups;
    for (int layer = 0; layer <= max_layer; ++layer) {
        AblationGroup mlp, attn, conv;
        for (size_t i = 0; i < set.components.size(); ++i) {
            const ComponentId& id = set.components[i].id;
            if (id.layer != layer) continue;
            if (id.kind == ComponentId::Kind::Mlp) {
                mlp.components.push_back(static_cast<int>(i));
                mlp.label = id.label();
            } else if (id.kind == ComponentId::Kind::Head || id.kind == ComponentId::Kind::Attn) {
                attn.components.push_back(static_cast<int>(i));
                attn.label = ComponentId::attn_merged(layer).label();
            } else if (id.kind == ComponentId::Kind::Opaque) {
                conv.components.push_back(static_cast<int>(i));
                conv.label = id.label();
            }
        }
        // reverse forward order within the block: mlp, then attention, then conv
        if (!mlp.components.empty()) groups.push_back(std::move(mlp));
        if (!attn.components.empty()) groups.push_back(std::move(attn));
        if (!conv.components.empty()) groups.push_back(std::move(conv));
        if (!groups.empty()) groups.back().ends_block = true;
    }
    for (size_t i = 0; i < set.components.size(); ++i)
        if (set.components[i].id.kind == ComponentId::Kind::Init) {
            AblationGroup init;
            init.label = "init";
            init.components.push_back(static_cast<int>(i));
            init.ends_block = true;
            groups.push_back(std::move(init));
        }
    return groups;
}

double accuracy_of(const std::vector<Tensor>& reps, const Predictor& predictor,
                   const std::vector<int>& labels) {
    int correct = 0;
    for (size_t i = 0; i < reps.size(); ++i)
        if (predictor(reps[i]) == labels[i]) ++correct;
    return reps.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(reps.size());
}

} // namespace

AblationCurve ablation_curve(const DecompositionSet& set, const Predictor& predictor,
                             const std::vector<int>& labels, int n_classes) {
    if (static_cast<int>(labels.size()) != set.images())
        throw ValidationError("ablation_curve: label count mismatch");
    std::vector<AblationGroup> groups = layer_groups(set);

    AblationCurve curve;
    const int n = set.images();
    std::vector<Tensor> reps(static_cast<size_t>(n));
    for (int img = 0; img < n; ++img) reps[static_cast<size_t>(img)] = set.z_at(img);
    curve.accuracy.push_back(accuracy_of(reps, predictor, labels));

    int step = 0;
    for (const AblationGroup& group : groups) {
        for (int c : group.components) {
            Tensor mean({set.d});
            std::vector<Tensor> per(static_cast<size_t>(n));
            for (int img = 0; img < n; ++img) per[static_cast<size_t>(img)] = set.component_vector(img, c);
            for (int img = 0; img < n; ++img) add_into(mean, per[static_cast<size_t>(img)]);
            for (float& v : mean.data) v /= static_cast<float>(n);
            for (int img = 0; img < n; ++img)
                for (int j = 0; j < set.d; ++j)
                    reps[static_cast<size_t>(img)].data[static_cast<size_t>(j)] +=
                        mean.data[static_cast<size_t>(j)] - per[static_cast<size_t>(img)].data[static_cast<size_t>(j)];
        }
        curve.group_order.push_back(group.label);
        curve.accuracy.push_back(accuracy_of(reps, predictor, labels));
        ++step;
        if (group.ends_block) curve.block_endpoints.push_back(step);
    }

    const double chance = 1.0 / static_cast<double>(n_classes);
    const double base = curve.accuracy.front() - chance;
    if (base > 1e-9 && curve.accuracy.size() > 1) {
        double acc = 0.0;
        for (size_t s = 1; s < curve.accuracy.size(); ++s) acc += (curve.accuracy[s] - chance) / base;
        curve.auc_normalized = acc / static_cast<double>(curve.accuracy.size() - 1);
    }
    return curve;
}

GroupAccuracy group_accuracy(const std::vector<int>& predictions, const std::vector<int>& fg,
                             const std::vector<int>& bg, int n_fg, int n_bg) {
    if (predictions.size() != fg.size() || fg.size() != bg.size())
        throw ValidationError("group_accuracy: length mismatch");
    GroupAccuracy g;
    g.n_fg = n_fg;
    g.n_bg = n_bg;
    g.cell.assign(static_cast<size_t>(n_fg) * n_bg, -1.0);
    g.counts.assign(static_cast<size_t>(n_fg) * n_bg, 0);
    std::vector<int> correct(static_cast<size_t>(n_fg) * n_bg, 0);
    for (size_t i = 0; i < predictions.size(); ++i) {
        size_t cell = static_cast<size_t>(fg[i]) * n_bg + static_cast<size_t>(bg[i]);
        g.counts[cell] += 1;
        if (predictions[i] == fg[i]) correct[cell] += 1;
    }
    double sum = 0.0;
    int filled = 0;
    g.worst = 1.0;
    g.best = 0.0;
    for (size_t cell = 0; cell < g.cell.size(); ++cell) {
        if (g.counts[cell] == 0) continue;
        double acc = static_cast<double>(correct[cell]) / g.counts[cell];
        g.cell[cell] = acc;
        g.worst = std::min(g.worst, acc);
        g.best = std::max(g.best, acc);
        sum += acc;
        ++filled;
    }
    if (filled == 0) throw ValidationError("group_accuracy: no groups present");
    g.average = sum / filled;
    return g;
}

MitigationReport mitigate_spurious(const DecompositionSet& set, const ScoreMatrix& scores,
                                   const std::string& spurious_feature,
                                   const std::optional<std::string>& core_feature, int k,
                                   const Predictor& predictor, const std::vector<int>& fg,
                                   const std::vector<int>& bg, int n_fg, int n_bg) {
    check_scores_match(set, scores);
    const int sp = scores.feature_index(spurious_feature);
    const int core = core_feature ? scores.feature_index(*core_feature) : -1;
    std::vector<int> chosen = select_by_gap(scores, sp, k, core);

    MitigationReport report;
    report.k = k;
    for (int c : chosen) report.ablated.push_back(set.components[static_cast<size_t>(c)].id.label());

    auto predictions = [&](const std::vector<Tensor>& reps) {
        std::vector<int> preds(reps.size());
        for (size_t i = 0; i < reps.size(); ++i) preds[i] = predictor(reps[i]);
        return preds;
    };
    std::vector<Tensor> raw(static_cast<size_t>(set.images()));
    for (int img = 0; img < set.images(); ++img) raw[static_cast<size_t>(img)] = set.z_at(img);
    report.before = group_accuracy(predictions(raw), fg, bg, n_fg, n_bg);
    report.after = group_accuracy(predictions(mean_ablate(set, chosen)), fg, bg, n_fg, n_bg);
    return report;
}

void write_curve_svg(const AblationCurve& curve, const std::string& path) {
    const int w = 640, h = 400, margin = 48;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    const size_t n = curve.accuracy.size();
    auto xof = [&](size_t s) { return margin + (w - 2.0 * margin) * (n > 1 ? static_cast<double>(s) / (n - 1) : 0.0); };
    auto yof = [&](double acc) { return h - margin - (h - 2.0 * margin) * acc; };
    svg << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - margin << "\" y2=\""
        << h - margin << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
        << h - margin << "\" stroke=\"black\"/>\n";
    svg << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (size_t s = 0; s < n; ++s) svg << xof(s) << "," << yof(curve.accuracy[s]) << " ";
    svg << "\"/>\n";
    for (int endpoint : curve.block_endpoints)
        svg << "<circle cx=\"" << xof(static_cast<size_t>(endpoint)) << "\" cy=\""
            << yof(curve.accuracy[static_cast<size_t>(endpoint)]) << "\" r=\"4\" fill=\"steelblue\"/>\n";
    svg << "</svg>\n";
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        out << svg.str();
    }
    std::filesystem::rename(tmp, path);
}

} // namespace vitdec
