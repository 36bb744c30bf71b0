#include "vitdec/artifacts.hpp"

#include "vitdec/errors.hpp"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace vitdec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'V', 'D', 'A', 'R', 'T', '0', '0', '1'};

uint64_t fnv1a(const void* data, size_t len, uint64_t state) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        state ^= p[i];
        state *= 0x100000001b3ULL;
    }
    return state;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

int64_t now_unix() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

void atomic_write(const std::string& path, const std::string& payload) {
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ValidationError("cannot write " + tmp);
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw ValidationError("short write to " + tmp);
    }
    fs::rename(tmp, path);
}

} // namespace

std::string config_hash(const json& config, const std::vector<float>& blob) {
    std::string canonical = config.dump(); // nlohmann keeps keys sorted
    uint64_t h = fnv1a(canonical.data(), canonical.size(), 0xcbf29ce484222325ULL);
    h = fnv1a(blob.data(), blob.size() * sizeof(float), h);
    return hex64(h);
}

void write_artifact(const std::string& path, const std::string& kind, json config, json extra,
                    const std::vector<float>& blob) {
    json header = std::move(extra);
    header["kind"] = kind;
    header["format_version"] = 1;
    header["config"] = std::move(config);
    header["config_hash"] = config_hash(header["config"], blob);
    header["created_unix"] = now_unix(); // outside the hashed region
    header["blob_floats"] = blob.size();

    std::string hs = header.dump();
    std::string payload;
    payload.reserve(16 + hs.size() + blob.size() * sizeof(float));
    payload.append(kMagic, sizeof(kMagic));
    uint64_t len = hs.size();
    payload.append(reinterpret_cast<const char*>(&len), sizeof(len));
    payload.append(hs);
    payload.append(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(float));
    atomic_write(path, payload);
}

RawArtifact read_artifact(const std::string& path, const std::string& expect_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("missing artifact: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ValidationError("corrupt artifact (bad magic): " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ULL << 32)) throw ValidationError("corrupt artifact (bad header length): " + path);
    std::string hs(len, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(len));
    if (!in) throw ValidationError("corrupt artifact (truncated header): " + path);

    RawArtifact art;
    try {
        art.header = json::parse(hs);
    } catch (const json::exception& e) {
        throw ValidationError("corrupt artifact (header parse): " + path + ": " + e.what());
    }
    if (art.header.value("kind", "") != expect_kind)
        throw ValidationError("artifact " + path + " has kind '" + art.header.value("kind", "") +
                              "', expected '" + expect_kind + "'");
    size_t n = art.header.value("blob_floats", size_t{0});
    art.blob.resize(n);
    in.read(reinterpret_cast<char*>(art.blob.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw ValidationError("corrupt artifact (truncated blob): " + path);

    std::string expect = art.header.value("config_hash", "");
    if (config_hash(art.header["config"], art.blob) != expect)
        throw ValidationError("corrupt artifact (hash mismatch): " + path);
    return art;
}

void write_json_file(const std::string& path, const json& j) { atomic_write(path, j.dump(2) + "\n"); }

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("missing file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("bad JSON in " + path + ": " + e.what());
    }
}

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"variant", to_string(cfg.variant)},
                {"depth", cfg.depth},
                {"heads", cfg.heads},
                {"dim", cfg.dim},
                {"patch_grid", cfg.patch_grid},
                {"window", cfg.window},
                {"shift_windows", cfg.shift_windows},
                {"image_size", cfg.image_size},
                {"channels", cfg.channels},
                {"n_classes", cfg.n_classes},
                {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.variant = variant_from_string(j.at("variant"));
    cfg.depth = j.at("depth");
    cfg.heads = j.at("heads");
    cfg.dim = j.at("dim");
    cfg.patch_grid = j.at("patch_grid");
    cfg.window = j.at("window");
    cfg.shift_windows = j.at("shift_windows");
    cfg.image_size = j.at("image_size");
    cfg.channels = j.at("channels");
    cfg.n_classes = j.at("n_classes");
    cfg.seed = j.at("seed");
    return cfg;
}

void save_model(const ToyModel& model, const PrototypeTable& prototypes, json config, json metrics,
                const std::string& path) {
    std::vector<float> blob;
    visit_params(model, [&](const Tensor& t) { blob.insert(blob.end(), t.data.begin(), t.data.end()); });
    for (const Tensor& row : prototypes.rows) blob.insert(blob.end(), row.data.begin(), row.data.end());

    json extra;
    extra["model"] = model_config_to_json(model.cfg);
    extra["model_id"] = model.cfg.id();
    extra["metrics"] = std::move(metrics);
    extra["prototype_names"] = prototypes.names;
    extra["prototype_features"] = prototypes.features;
    extra["prototype_dim"] = model.cfg.final_dim();
    write_artifact(path, "model", std::move(config), std::move(extra), blob);
}

ModelArtifact load_model(const std::string& path) {
    RawArtifact art = read_artifact(path, "model");
    ModelArtifact out;
    out.header = art.header;
    ModelConfig cfg = model_config_from_json(art.header.at("model"));
    out.model = build_model(cfg); // allocates the right shapes

    size_t cursor = 0;
    visit_params(out.model, [&](Tensor& t) {
        if (cursor + t.data.size() > art.blob.size())
            throw ValidationError("model artifact blob too short: " + path);
        std::copy_n(art.blob.begin() + static_cast<long>(cursor), t.data.size(), t.data.begin());
        cursor += t.data.size();
    });
    out.prototypes.names = art.header.at("prototype_names").get<std::vector<std::string>>();
    out.prototypes.features = art.header.at("prototype_features").get<std::vector<std::string>>();
    const int pd = art.header.at("prototype_dim");
    for (size_t i = 0; i < out.prototypes.names.size(); ++i) {
        if (cursor + static_cast<size_t>(pd) > art.blob.size())
            throw ValidationError("model artifact blob too short (prototypes): " + path);
        Tensor row({pd});
        std::copy_n(art.blob.begin() + static_cast<long>(cursor), pd, row.data.begin());
        cursor += static_cast<size_t>(pd);
        out.prototypes.rows.push_back(std::move(row));
    }
    if (cursor != art.blob.size())
        throw ValidationError("model artifact blob size mismatch: " + path);
    bool finite = true;
    visit_params(out.model, [&](const Tensor& t) { finite = finite && all_finite(t); });
    if (!finite) throw NumericError("model artifact has non-finite weights: " + path);
    return out;
}

void save_decomposition_set(const DecompositionSet& set, json config, const std::string& path) {
    json extra;
    extra["model_id"] = set.model_id;
    extra["dataset_ref"] = set.dataset_ref;
    extra["granularity"] = to_string(set.granularity);
    extra["n_layers_decomposed"] = set.n_layers_decomposed;
    extra["d"] = set.d;
    extra["tol"] = set.tol;
    extra["max_residual"] = set.max_residual;
    json comps = json::array();
    for (const ComponentEntry& e : set.components)
        comps.push_back({{"label", e.id.label()},
                         {"token_count", e.tokens.count},
                         {"grid", e.tokens.grid},
                         {"has_cls", e.tokens.has_cls}});
    extra["components"] = std::move(comps);
    json slots = json::array();
    for (const DecompositionSet::Slot& s : set.slots) slots.push_back({s.component, s.token});
    extra["slots"] = std::move(slots);
    extra["image_ids"] = set.image_ids;

    std::vector<float> blob;
    blob.reserve(set.zs.size() + set.contrib.size());
    blob.insert(blob.end(), set.zs.begin(), set.zs.end());
    blob.insert(blob.end(), set.contrib.begin(), set.contrib.end());
    write_artifact(path, "decomposition", std::move(config), std::move(extra), blob);
}

DecompositionSet load_decomposition_set(const std::string& path) {
    RawArtifact art = read_artifact(path, "decomposition");
    DecompositionSet set;
    set.model_id = art.header.at("model_id");
    set.dataset_ref = art.header.value("dataset_ref", "");
    set.granularity = granularity_from_string(art.header.at("granularity"));
    set.n_layers_decomposed = art.header.at("n_layers_decomposed");
    set.d = art.header.at("d");
    set.tol = art.header.at("tol");
    set.max_residual = art.header.at("max_residual");
    for (const json& c : art.header.at("components")) {
        ComponentEntry e;
        e.id = parse_component_label(c.at("label"));
        e.tokens.count = c.at("token_count");
        e.tokens.grid = c.at("grid");
        e.tokens.has_cls = c.at("has_cls");
        set.components.push_back(std::move(e));
    }
    for (const json& s : art.header.at("slots"))
        set.slots.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
    set.image_ids = art.header.at("image_ids").get<std::vector<int>>();

    const size_t nz = static_cast<size_t>(set.images()) * set.d;
    const size_t nc = static_cast<size_t>(set.images()) * set.slots.size() * set.d;
    if (art.blob.size() != nz + nc)
        throw ValidationError("decomposition artifact blob size mismatch: " + path);
    set.zs.assign(art.blob.begin(), art.blob.begin() + static_cast<long>(nz));
    set.contrib.assign(art.blob.begin() + static_cast<long>(nz), art.blob.end());
    set.verify(); // reconstruction identity, every image
    return set;
}

void save_aligner(const Aligner& aligner, json config, const std::string& path) {
    json extra;
    extra["component_labels"] = aligner.component_labels;
    extra["d"] = aligner.d;
    extra["d_ref"] = aligner.d_ref;
    extra["lambda"] = aligner.lambda;
    extra["single_map"] = aligner.single_map;
    extra["seed"] = aligner.seed;
    extra["log"] = {{"loss_curve", aligner.log.loss_curve},
                    {"cos_curve", aligner.log.cos_curve},
                    {"final_train_cos", aligner.log.final_train_cos},
                    {"final_val_cos", aligner.log.final_val_cos},
                    {"skipped_samples", aligner.log.skipped_samples}};

    std::vector<float> blob;
    blob.reserve(aligner.maps.size() * static_cast<size_t>(aligner.d) * aligner.d_ref);
    for (const Eigen::MatrixXd& f : aligner.maps)
        for (int r = 0; r < f.rows(); ++r)
            for (int c = 0; c < f.cols(); ++c) blob.push_back(static_cast<float>(f(r, c)));
    write_artifact(path, "aligner", std::move(config), std::move(extra), blob);
}

Aligner load_aligner(const std::string& path) {
    RawArtifact art = read_artifact(path, "aligner");
    Aligner a;
    a.component_labels = art.header.at("component_labels").get<std::vector<std::string>>();
    a.d = art.header.at("d");
    a.d_ref = art.header.at("d_ref");
    a.lambda = art.header.at("lambda");
    a.single_map = art.header.at("single_map");
    a.seed = art.header.at("seed");
    const json& log = art.header.at("log");
    a.log.loss_curve = log.at("loss_curve").get<std::vector<double>>();
    a.log.cos_curve = log.at("cos_curve").get<std::vector<double>>();
    a.log.final_train_cos = log.at("final_train_cos");
    a.log.final_val_cos = log.at("final_val_cos");
    a.log.skipped_samples = log.at("skipped_samples");

    const size_t per = static_cast<size_t>(a.d) * a.d_ref;
    if (art.blob.size() != per * a.component_labels.size())
        throw ValidationError("aligner artifact blob size mismatch: " + path);
    size_t cursor = 0;
    for (size_t k = 0; k < a.component_labels.size(); ++k) {
        Eigen::MatrixXd f(a.d_ref, a.d);
        for (int r = 0; r < a.d_ref; ++r)
            for (int c = 0; c < a.d; ++c) f(r, c) = art.blob[cursor++];
        a.maps.push_back(std::move(f));
    }
    return a;
}

void save_scores(const ScoreMatrix& scores, json config, const std::string& path) {
    json j;
    j["kind"] = "scores";
    j["component_labels"] = scores.component_labels;
    j["feature_names"] = scores.feature_names;
    std::vector<double> flat;
    for (int i = 0; i < scores.components(); ++i)
        for (int p = 0; p < scores.features(); ++p) flat.push_back(scores.scores(i, p));
    j["scores"] = flat;
    j["degenerate"] = scores.degenerate;
    j["aligner_id"] = scores.aligner_id;
    j["dataset_id"] = scores.dataset_id;
    j["n_images"] = scores.n_images;
    j["config"] = std::move(config);
    j["config_hash"] = config_hash(j["config"], {});
    j["created_unix"] = now_unix();
    write_json_file(path, j);
}

ScoreMatrix load_scores(const std::string& path) {
    json j = read_json_file(path);
    if (j.value("kind", "") != "scores") throw ValidationError("not a score file: " + path);
    ScoreMatrix s;
    s.component_labels = j.at("component_labels").get<std::vector<std::string>>();
    s.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    std::vector<double> flat = j.at("scores").get<std::vector<double>>();
    s.degenerate = j.at("degenerate").get<std::vector<uint8_t>>();
    s.aligner_id = j.at("aligner_id");
    s.dataset_id = j.at("dataset_id");
    s.n_images = j.at("n_images");
    const int nc = static_cast<int>(s.component_labels.size());
    const int nf = static_cast<int>(s.feature_names.size());
    if (flat.size() != static_cast<size_t>(nc) * nf || s.degenerate.size() != flat.size())
        throw ValidationError("score file shape mismatch: " + path);
    s.scores.resize(nc, nf);
    for (int i = 0; i < nc; ++i)
        for (int p = 0; p < nf; ++p) {
            double v = flat[static_cast<size_t>(i) * nf + p];
            if (!std::isfinite(v)) throw NumericError("score file has non-finite entries: " + path);
            if (v < -1.0000001 || v > 1.0000001)
                throw NumericError("score file entry outside [-1,1]: " + path);
            s.scores(i, p) = v;
        }
    return s;
}

} // namespace vitdec
