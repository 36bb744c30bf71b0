#include "vitdec/commands.hpp"

#include "vitdec/applications.hpp"
#include "vitdec/artifacts.hpp"
#include "vitdec/errors.hpp"

#include <cstdio>
#include <filesystem>
#include <functional>

namespace vitdec::cmd {

namespace fs = std::filesystem;
using nlohmann::json;

std::string resolve(const GlobalOpts& g, const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute() || g.artifact_root.empty() || g.artifact_root == ".")
        return path;
    return (fs::path(g.artifact_root) / path).string();
}

namespace {

void summary(const std::string& line) { std::printf("%s\n", line.c_str()); }

std::vector<FeatureSpec> features_from_prototypes(const PrototypeTable& table) {
    std::vector<FeatureSpec> specs;
    for (size_t i = 0; i < table.rows.size(); ++i) {
        const std::string& feature = table.features[i];
        FeatureSpec* spec = nullptr;
        for (FeatureSpec& s : specs)
            if (s.name == feature) spec = &s;
        if (!spec) {
            specs.push_back({feature, {}, {}});
            spec = &specs.back();
        }
        spec->instantiations.push_back(table.names[i]);
    }
    for (FeatureSpec& s : specs) {
        int rows = static_cast<int>(s.instantiations.size());
        int d = table.rows[0].dim(0);
        s.embeddings.resize(rows, d);
        int r = 0;
        for (size_t i = 0; i < table.rows.size(); ++i) {
            if (table.features[i] != s.name) continue;
            for (int j = 0; j < d; ++j) s.embeddings(r, j) = table.rows[i].data[static_cast<size_t>(j)];
            ++r;
        }
    }
    return specs;
}

Eigen::VectorXd prototype_vector(const PrototypeTable& table, const std::string& name) {
    for (size_t i = 0; i < table.names.size(); ++i)
        if (table.names[i] == name) {
            const Tensor& row = table.rows[i];
            Eigen::VectorXd v(row.dim(0));
            for (int j = 0; j < row.dim(0); ++j) v[j] = row.data[static_cast<size_t>(j)];
            return v;
        }
    throw ValidationError("unknown prototype instantiation '" + name + "'");
}

Eigen::MatrixXd teacher_targets(const ToyModel& teacher, const SyntheticDataset& ds,
                                const std::vector<int>& ids) {
    std::vector<Tensor> reps = represent_batch(teacher, ds, ids);
    Eigen::MatrixXd out(static_cast<int>(reps.size()), teacher.cfg.final_dim());
    for (size_t i = 0; i < reps.size(); ++i)
        for (int j = 0; j < out.cols(); ++j) out(static_cast<int>(i), j) = reps[i].data[static_cast<size_t>(j)];
    return out;
}

std::vector<int> positions_of(const DecompositionSet& set, const SyntheticDataset& ds,
                              std::vector<int>* fg, std::vector<int>* bg) {
    std::vector<int> pos(set.image_ids.size());
    for (size_t i = 0; i < set.image_ids.size(); ++i) {
        int id = set.image_ids[i];
        if (id < 0 || id >= ds.size())
            throw ValidationError("decomposition references image " + std::to_string(id) +
                                  " outside the dataset");
        pos[i] = id;
        if (fg) fg->push_back(ds.labels[static_cast<size_t>(id)]);
        if (bg) bg->push_back(ds.groups[static_cast<size_t>(id)]);
    }
    return pos;
}

} // namespace

int cmd_dataset(const GlobalOpts& g, const DatasetArgs& a) {
    if (a.out.empty()) throw ValidationError("dataset: --out is required");
    DatasetSpec spec;
    spec.n_fg = a.n_fg;
    spec.n_bg = a.n_bg;
    spec.n_train = a.n_train;
    spec.n_val = a.n_val;
    spec.n_test = a.n_test;
    spec.rho_train = a.rho_train;
    spec.rho_val = a.rho_val;
    spec.rho_test = a.rho_test;
    spec.fg_alpha = static_cast<float>(a.fg_alpha);
    spec.fg_half = static_cast<float>(a.fg_half);
    spec.noise = static_cast<float>(a.noise);
    spec.fg_style = a.fg_style;
    spec.image_size = a.image_size;
    spec.seed = a.seed;
    SyntheticDataset ds = gen_synthetic(spec);
    std::string out = resolve(g, a.out);
    save_dataset(ds, out);
    summary("dataset: images=" + std::to_string(ds.size()) + " rho_train=" + std::to_string(spec.rho_train) +
            " -> " + out);
    return kOk;
}

int cmd_train(const GlobalOpts& g, const TrainArgs& a) {
    if (a.dataset.empty() || a.out.empty()) throw ValidationError("train: --dataset and --out are required");
    SyntheticDataset ds = load_dataset(resolve(g, a.dataset));

    ModelConfig cfg;
    cfg.variant = variant_from_string(a.variant);
    cfg.depth = a.depth;
    cfg.heads = a.heads;
    cfg.dim = a.dim;
    cfg.patch_grid = a.patch_grid;
    cfg.window = a.window;
    cfg.image_size = ds.spec.image_size;
    cfg.seed = a.model_seed;
    TrainConfig tc;
    tc.epochs = a.epochs;
    tc.batch = a.batch;
    tc.lr = static_cast<float>(a.lr);
    tc.seed = a.train_seed;
    tc.target = train_target_from_string(a.target);
    cfg.n_classes = target_classes(ds, tc.target);

    ToyModel model = build_model(cfg);
    TrainResult result = train_toy(model, ds, tc);
    PrototypeTable prototypes = compute_prototypes(model, ds, ds.train_idx);

    json config{{"command", "train"},    {"dataset", a.dataset}, {"variant", a.variant},
                {"depth", a.depth},      {"heads", a.heads},     {"dim", a.dim},
                {"patch_grid", a.patch_grid}, {"window", a.window}, {"model_seed", a.model_seed},
                {"train_seed", a.train_seed}, {"epochs", a.epochs}, {"batch", a.batch},
                {"lr", a.lr},            {"target", a.target}};
    json metrics{{"train_accuracy", result.train_accuracy},
                 {"val_accuracy", result.val_accuracy},
                 {"loss_curve", result.loss_curve}};
    std::string out = resolve(g, a.out);
    save_model(model, prototypes, config, metrics, out);
    summary("train: val_accuracy=" + std::to_string(result.val_accuracy) + " -> " + out);
    return kOk;
}

int cmd_decompose(const GlobalOpts& g, const DecomposeArgs& a) {
    if (a.model.empty() || a.dataset.empty() || a.out.empty())
        throw ValidationError("decompose: --model, --dataset and --out are required");
    ModelArtifact model = load_model(resolve(g, a.model));
    SyntheticDataset ds = load_dataset(resolve(g, a.dataset));
    Split split = split_from_string(a.split);

    DecomposeOptions opts;
    opts.granularity = granularity_from_string(a.granularity);
    opts.layers = a.layers;
    opts.tol = a.tol;
    DecompositionSet set = decompose_dataset(model.model, ds, ds.split(split), opts);
    set.dataset_ref = a.dataset + ":" + a.split;

    json config{{"command", "decompose"}, {"model", a.model},   {"dataset", a.dataset},
                {"split", a.split},       {"granularity", a.granularity}, {"layers", a.layers},
                {"tol", a.tol}};
    std::string out = resolve(g, a.out);
    save_decomposition_set(set, config, out);
    summary("decompose: images=" + std::to_string(set.images()) +
            " max_residual=" + std::to_string(set.max_residual) + " -> " + out);
    return kOk;
}

int cmd_decompose_verify(const GlobalOpts& g, const std::string& path) {
    DecompositionSet set = load_decomposition_set(resolve(g, path)); // verifies on load
    double worst = 0.0;
    for (int i = 0; i < set.images(); ++i) worst = std::max(worst, set.residual_of(i));
    summary("decompose verify: images=" + std::to_string(set.images()) +
            " worst_residual=" + std::to_string(worst) + " tol=" + std::to_string(set.tol) + " ok");
    return kOk;
}

int cmd_align(const GlobalOpts& g, const AlignArgs& a) {
    if (a.decomp.empty() || a.teacher.empty() || a.dataset.empty() || a.out.empty())
        throw ValidationError("align: --decomp, --teacher, --dataset and --out are required");
    DecompositionSet set = load_decomposition_set(resolve(g, a.decomp));
    ModelArtifact teacher = load_model(resolve(g, a.teacher));
    SyntheticDataset ds = load_dataset(resolve(g, a.dataset));

    AlignData train = align_data_from(set, teacher_targets(teacher.model, ds, set.image_ids));
    AlignData val;
    bool has_val = false;
    if (!a.val_decomp.empty()) {
        DecompositionSet vset = load_decomposition_set(resolve(g, a.val_decomp));
        val = align_data_from(vset, teacher_targets(teacher.model, ds, vset.image_ids));
        has_val = true;
    }

    AlignTrainConfig cfg;
    cfg.learning_rate = a.lr;
    cfg.lambda = a.lambda;
    cfg.use_penalty = !a.no_penalty;
    cfg.single_map = a.single_map;
    cfg.epochs = a.epochs;
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    Aligner aligner = train_compalign(train, has_val ? &val : nullptr, cfg, component_labels(set));

    json config{{"command", "align"},   {"decomp", a.decomp},     {"teacher", a.teacher},
                {"dataset", a.dataset}, {"val_decomp", a.val_decomp}, {"lambda", a.lambda},
                {"no_penalty", a.no_penalty}, {"single_map", a.single_map}, {"lr", a.lr},
                {"epochs", a.epochs},   {"batch", a.batch},       {"seed", a.seed}};
    std::string out = resolve(g, a.out);
    save_aligner(aligner, config, out);
    std::string line = "align: train_cos_distance=" + std::to_string(aligner.log.final_train_cos);
    if (has_val) line += " val_cos_distance=" + std::to_string(aligner.log.final_val_cos);
    summary(line + " -> " + out);
    return kOk;
}

int cmd_align_report(const GlobalOpts& g, const std::string& path) {
    Aligner aligner = load_aligner(resolve(g, path));
    std::vector<OrthogonalityRow> rows = orthogonality_report(aligner);
    std::printf("%-12s %14s %10s %14s %12s\n", "component", "||F'F - I||_F", "best k", "||F'F - kI||_F",
                "rel(kI)");
    for (const OrthogonalityRow& r : rows)
        std::printf("%-12s %14.6f %10.4f %14.6f %12.6f\n", r.component.c_str(), r.deviation_identity,
                    r.best_k, r.deviation_scaled, r.relative_scaled);
    summary("align report: maps=" + std::to_string(rows.size()) +
            " lambda=" + std::to_string(aligner.lambda));
    return kOk;
}

int cmd_score(const GlobalOpts& g, const ScoreArgs& a) {
    if (a.decomp.empty() || a.aligner.empty() || a.teacher.empty() || a.out.empty())
        throw ValidationError("score: --decomp, --aligner, --teacher and --out are required");
    DecompositionSet set = load_decomposition_set(resolve(g, a.decomp));
    Aligner aligner = load_aligner(resolve(g, a.aligner));
    ModelArtifact teacher = load_model(resolve(g, a.teacher));

    std::vector<FeatureSpec> features = features_from_prototypes(teacher.prototypes);
    std::vector<Eigen::MatrixXd> aligned = aligned_component_matrices(set, aligner);
    ScoreMatrix scores = score_matrix(aligned, component_labels(set), features);
    scores.aligner_id = a.aligner;
    scores.dataset_id = set.dataset_ref;

    json config{{"command", "score"}, {"decomp", a.decomp}, {"aligner", a.aligner}, {"teacher", a.teacher}};
    std::string out = resolve(g, a.out);
    save_scores(scores, config, out);

    for (int p = 0; p < scores.features(); ++p) {
        std::printf("feature %-12s top components:", scores.feature_names[static_cast<size_t>(p)].c_str());
        std::vector<int> order = component_ordering(scores, p);
        for (int i = 0; i < std::min(a.top_k, static_cast<int>(order.size())); ++i)
            std::printf(" %s(%.3f)", scores.component_labels[static_cast<size_t>(order[static_cast<size_t>(i)])].c_str(),
                        scores.scores(order[static_cast<size_t>(i)], p));
        std::printf("\n");
    }
    summary("score: components=" + std::to_string(scores.components()) +
            " features=" + std::to_string(scores.features()) + " -> " + out);
    return kOk;
}

int cmd_retrieve(const GlobalOpts& g, const RetrieveArgs& a) {
    if (a.decomp.empty() || a.scores.empty() || a.out.empty())
        throw ValidationError("retrieve: --decomp, --scores and --out are required");
    DecompositionSet set = load_decomposition_set(resolve(g, a.decomp));
    ScoreMatrix scores = load_scores(resolve(g, a.scores));

    RetrievalResult result;
    if (a.mode == "text") {
        if (a.aligner.empty() || a.teacher.empty())
            throw ValidationError("retrieve text: --aligner and --teacher are required");
        if (a.instantiation.empty()) throw ValidationError("retrieve text: --instantiation is required");
        Aligner aligner = load_aligner(resolve(g, a.aligner));
        ModelArtifact teacher = load_model(resolve(g, a.teacher));
        Eigen::VectorXd u = prototype_vector(teacher.prototypes, a.instantiation);
        result = retrieve_text(set, aligner, scores, a.feature, u, a.k_comp, a.k_img);
        result.query = a.feature + ":" + a.instantiation;
    } else if (a.mode == "image") {
        if (a.ref_image < 0) throw ValidationError("retrieve image: --ref-image is required");
        int pos = -1;
        for (size_t i = 0; i < set.image_ids.size(); ++i)
            if (set.image_ids[i] == a.ref_image) pos = static_cast<int>(i);
        if (pos < 0)
            throw ValidationError("retrieve image: reference image not in the decomposition set");
        result = retrieve_image(set, scores, a.feature, a.k_comp, pos, a.k_img);
    } else {
        throw ValidationError("retrieve: mode must be 'text' or 'image'");
    }

    json j{{"kind", "retrieval"},
           {"mode", a.mode},
           {"query", result.query},
           {"components_used", result.components_used},
           {"image_ids", result.image_ids},
           {"similarities", result.similarities},
           {"excluded", result.excluded},
           {"uninformative", result.uninformative}};
    json config{{"command", "retrieve"}, {"mode", a.mode},      {"decomp", a.decomp},
                {"scores", a.scores},    {"feature", a.feature}, {"instantiation", a.instantiation},
                {"k_comp", a.k_comp},    {"k_img", a.k_img},    {"ref_image", a.ref_image}};
    j["config"] = config;
    std::string out = resolve(g, a.out);
    write_json_file(out, j);
    summary("retrieve: top=" + std::to_string(result.image_ids.size()) + " query=" + result.query +
            " -> " + out);
    return kOk;
}

int cmd_heatmap(const GlobalOpts& g, const HeatmapArgs& a) {
    if (a.decomp.empty() || a.aligner.empty() || a.scores.empty() || a.teacher.empty() || a.out.empty())
        throw ValidationError("heatmap: --decomp, --aligner, --scores, --teacher and --out are required");
    if (a.instantiation.empty()) throw ValidationError("heatmap: --instantiation is required");
    DecompositionSet set = load_decomposition_set(resolve(g, a.decomp));
    Aligner aligner = load_aligner(resolve(g, a.aligner));
    ScoreMatrix scores = load_scores(resolve(g, a.scores));
    ModelArtifact teacher = load_model(resolve(g, a.teacher));

    int pos = -1;
    for (size_t i = 0; i < set.image_ids.size(); ++i)
        if (set.image_ids[i] == a.image) pos = static_cast<int>(i);
    if (pos < 0) throw ValidationError("heatmap: image not in the decomposition set");

    std::vector<int> order = component_ordering(scores, scores.feature_index(a.feature));
    order.resize(static_cast<size_t>(std::min(a.k_comp, static_cast<int>(order.size()))));
    Eigen::VectorXd u = prototype_vector(teacher.prototypes, a.instantiation);
    HeatmapImage map = token_heatmap(set, aligner, u, order, pos);

    std::string out = resolve(g, a.out);
    write_heatmap_ppm(map, out, a.cell_pixels);
    json sidecar{{"kind", "heatmap"},
                 {"image", a.image},
                 {"feature", a.feature},
                 {"instantiation", a.instantiation},
                 {"grid", map.grid},
                 {"has_cls", map.has_cls},
                 {"cells", map.cell},
                 {"cls_score", map.cls_score},
                 {"unmapped", map.unmapped},
                 {"bound", map.bound},
                 {"components_used", map.components_used}};
    write_json_file(out + ".json", sidecar);
    summary("heatmap: grid=" + std::to_string(map.grid) + " bound=" + std::to_string(map.bound) +
            " cls=" + std::to_string(map.cls_score) + " -> " + out);
    return kOk;
}

int cmd_ablate(const GlobalOpts& g, const AblateArgs& a) {
    if (a.model.empty() || a.decomp.empty() || a.dataset.empty() || a.out.empty())
        throw ValidationError("ablate: --model, --decomp, --dataset and --out are required");
    ModelArtifact model = load_model(resolve(g, a.model));
    DecompositionSet set = load_decomposition_set(resolve(g, a.decomp));
    SyntheticDataset ds = load_dataset(resolve(g, a.dataset));
    TrainTarget target = train_target_from_string(a.target);

    std::vector<int> labels;
    for (int id : set.image_ids) labels.push_back(target_label(ds, id, target));
    Predictor predictor = [&](const Tensor& z) { return predict_from(model.model, z); };
    AblationCurve curve = ablation_curve(set, predictor, labels, model.model.cfg.n_classes);

    json j{{"kind", "ablation_curve"},
           {"group_order", curve.group_order},
           {"accuracy", curve.accuracy},
           {"block_endpoints", curve.block_endpoints},
           {"auc_normalized", curve.auc_normalized}};
    j["config"] = json{{"command", "ablate"}, {"model", a.model}, {"decomp", a.decomp},
                       {"dataset", a.dataset}, {"target", a.target}};
    std::string out = resolve(g, a.out);
    write_json_file(out, j);
    if (!a.svg.empty()) write_curve_svg(curve, resolve(g, a.svg));
    summary("ablate: steps=" + std::to_string(curve.accuracy.size()) +
            " base=" + std::to_string(curve.accuracy.front()) +
            " final=" + std::to_string(curve.accuracy.back()) + " -> " + out);
    return kOk;
}

int cmd_mitigate(const GlobalOpts& g, const MitigateArgs& a) {
    if (a.model.empty() || a.decomp.empty() || a.scores.empty() || a.dataset.empty() || a.out.empty())
        throw ValidationError("mitigate: --model, --decomp, --scores, --dataset and --out are required");
    ModelArtifact model = load_model(resolve(g, a.model));
    DecompositionSet set = load_decomposition_set(resolve(g, a.decomp));
    ScoreMatrix scores = load_scores(resolve(g, a.scores));
    SyntheticDataset ds = load_dataset(resolve(g, a.dataset));

    std::vector<int> fg, bg;
    positions_of(set, ds, &fg, &bg);
    int k = a.k >= 0 ? a.k : std::max(2, static_cast<int>(set.components.size()) / 6);
    Predictor predictor = [&](const Tensor& z) { return predict_from(model.model, z); };
    std::optional<std::string> core;
    if (!a.core.empty()) core = a.core;
    MitigationReport report = mitigate_spurious(set, scores, a.spurious, core, k, predictor, fg, bg,
                                                ds.spec.n_fg, ds.spec.n_bg);

    auto group_json = [](const GroupAccuracy& ga) {
        return json{{"n_fg", ga.n_fg},     {"n_bg", ga.n_bg},   {"cell", ga.cell},
                    {"counts", ga.counts}, {"worst", ga.worst}, {"average", ga.average},
                    {"best", ga.best}};
    };
    json j{{"kind", "mitigation"},
           {"before", group_json(report.before)},
           {"after", group_json(report.after)},
           {"ablated", report.ablated},
           {"k", report.k}};
    j["config"] = json{{"command", "mitigate"}, {"model", a.model},   {"decomp", a.decomp},
                       {"scores", a.scores},    {"dataset", a.dataset}, {"spurious", a.spurious},
                       {"core", a.core},        {"k", k}};
    std::string out = resolve(g, a.out);
    write_json_file(out, j);
    summary("mitigate: worst " + std::to_string(report.before.worst) + " -> " +
            std::to_string(report.after.worst) + ", average " + std::to_string(report.before.average) +
            " -> " + std::to_string(report.after.average) + " -> " + out);
    return kOk;
}

int run_guarded(const GlobalOpts& g, const char* command, int (*fn)(const GlobalOpts&, const void*),
                const void* args) {
    auto report = [&](const char* kind, const std::string& what, int code) {
        if (g.error_json) {
            nlohmann::json j{{"error", what}, {"kind", kind}, {"command", command}, {"exit", code}};
            std::fprintf(stderr, "%s\n", j.dump().c_str());
        } else {
            std::fprintf(stderr, "%s: %s\n", command, what.c_str());
        }
        return code;
    };
    try {
        return fn(g, args);
    } catch (const NumericError& e) {
        return report("numeric", e.what(), kNumeric);
    } catch (const ValidationError& e) {
        return report("validation", e.what(), kValidation);
    } catch (const std::exception& e) {
        return report("validation", e.what(), kValidation);
    }
}

} // namespace vitdec::cmd
