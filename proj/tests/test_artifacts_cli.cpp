#include "vitdec/applications.hpp"
#include "vitdec/artifacts.hpp"
#include "vitdec/commands.hpp"
#include "vitdec/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace vitdec;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::path("./tmp_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

SyntheticDataset tiny_dataset(uint64_t seed) {
    DatasetSpec spec;
    spec.n_train = 24;
    spec.n_val = 16;
    spec.n_test = 16;
    spec.seed = seed;
    return gen_synthetic(spec);
}

ToyModel tiny_model(uint64_t seed) {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.dim = 16;
    cfg.seed = seed;
    return build_model(cfg);
}

} // namespace

TEST_CASE("model artifacts round-trip weights, config and prototypes") {
    TempDir dir("model_artifact");
    ToyModel model = tiny_model(5);
    SyntheticDataset ds = tiny_dataset(6);
    PrototypeTable prototypes = compute_prototypes(model, ds, ds.train_idx);
    save_model(model, prototypes, {{"command", "test"}}, {{"val_accuracy", 0.5}}, dir / "m.vda");

    ModelArtifact loaded = load_model(dir / "m.vda");
    CHECK(loaded.model.cfg.id() == model.cfg.id());
    bool equal = true;
    std::vector<const Tensor*> a, b;
    visit_params(model, [&](const Tensor& t) { a.push_back(&t); });
    visit_params(loaded.model, [&](const Tensor& t) { b.push_back(&t); });
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) equal = equal && (a[i]->data == b[i]->data);
    CHECK(equal);
    REQUIRE(loaded.prototypes.names.size() == prototypes.names.size());
    for (size_t i = 0; i < prototypes.rows.size(); ++i)
        CHECK(loaded.prototypes.rows[i].data == prototypes.rows[i].data);
    CHECK(loaded.header.at("metrics").at("val_accuracy") == 0.5);
}

TEST_CASE("decomposition artifacts verify the identity on load and reject corruption") {
    TempDir dir("decomp_artifact");
    ToyModel model = tiny_model(7);
    SyntheticDataset ds = tiny_dataset(8);
    std::vector<int> ids(ds.val_idx.begin(), ds.val_idx.begin() + 6);
    DecompositionSet set = decompose_dataset(model, ds, ids, {});
    std::string path = dir / "d.vda";
    save_decomposition_set(set, {{"command", "test"}}, path);

    DecompositionSet loaded = load_decomposition_set(path);
    CHECK(loaded.images() == set.images());
    CHECK(loaded.contrib == set.contrib);
    CHECK(component_labels(loaded) == component_labels(set));

    // flip one payload byte: the container hash must catch it
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-64, std::ios::end);
        char byte = 0;
        f.read(&byte, 1);
        f.seekp(-64, std::ios::end);
        byte = static_cast<char>(byte ^ 0x40);
        f.write(&byte, 1);
    }
    CHECK_THROWS_WITH_AS(load_decomposition_set(path), doctest::Contains("hash mismatch"),
                         ValidationError);

    CHECK_THROWS_AS(load_decomposition_set(dir / "missing.vda"), ValidationError);
    CHECK_THROWS_AS(load_model(path), ValidationError); // wrong kind even if restored
}

TEST_CASE("a decomposition whose payload breaks the identity fails on load") {
    TempDir dir("decomp_bad");
    ToyModel model = tiny_model(9);
    SyntheticDataset ds = tiny_dataset(10);
    std::vector<int> ids(ds.val_idx.begin(), ds.val_idx.begin() + 3);
    DecompositionSet set = decompose_dataset(model, ds, ids, {});
    set.contrib[3] += 1.0f; // breaks sum(contributions) = z
    std::string path = dir / "bad.vda";
    save_decomposition_set(set, {{"command", "test"}}, path);
    CHECK_THROWS_AS(load_decomposition_set(path), NumericError);
}

TEST_CASE("aligner artifacts round-trip at float32 precision") {
    TempDir dir("aligner_artifact");
    Rng rng(11);
    Aligner aligner;
    aligner.component_labels = {"init", "head00.0"};
    aligner.d = 6;
    aligner.d_ref = 6;
    aligner.lambda = 0.125;
    aligner.seed = 3;
    aligner.maps.push_back(random_orthogonal(6, 6, rng));
    aligner.maps.push_back(2.0 * random_orthogonal(6, 6, rng));
    aligner.log.loss_curve = {0.5, 0.25};
    aligner.log.cos_curve = {0.5, 0.24};
    aligner.log.final_train_cos = 0.25;
    std::string path = dir / "a.vda";
    save_aligner(aligner, {{"command", "test"}}, path);
    Aligner loaded = load_aligner(path);
    CHECK(loaded.component_labels == aligner.component_labels);
    CHECK(loaded.lambda == 0.125);
    for (size_t k = 0; k < aligner.maps.size(); ++k)
        for (int r = 0; r < 6; ++r)
            for (int c = 0; c < 6; ++c)
                CHECK(loaded.maps[k](r, c) ==
                      doctest::Approx(aligner.maps[k](r, c)).epsilon(1e-6));
}

TEST_CASE("score files validate their payload on load") {
    TempDir dir("scores");
    ScoreMatrix s;
    s.component_labels = {"init", "mlp00"};
    s.feature_names = {"foreground", "background"};
    s.scores.resize(2, 2);
    s.scores << 0.5, -0.25, 0.0, 1.0;
    s.degenerate.assign(4, 0);
    s.n_images = 10;
    std::string path = dir / "s.json";
    save_scores(s, {{"command", "test"}}, path);
    ScoreMatrix loaded = load_scores(path);
    CHECK(loaded.scores(0, 1) == -0.25);
    CHECK(loaded.feature_index("background") == 1);

    nlohmann::json j = read_json_file(path);
    j["scores"][0] = 7.5; // outside [-1, 1]
    write_json_file(path, j);
    CHECK_THROWS_AS(load_scores(path), NumericError);
}

TEST_CASE("config hash covers config and payload but not timestamps") {
    nlohmann::json config{{"a", 1}, {"b", "x"}};
    std::vector<float> blob{1.0f, 2.0f};
    std::string h1 = config_hash(config, blob);
    CHECK(h1 == config_hash(config, blob));
    CHECK(h1 != config_hash(nlohmann::json{{"a", 2}, {"b", "x"}}, blob));
    std::vector<float> blob2{1.0f, 2.5f};
    CHECK(h1 != config_hash(config, blob2));
}

TEST_CASE("rewriting an artifact with identical inputs keeps the hashed region stable") {
    TempDir dir("idempotent");
    nlohmann::json config{{"command", "test"}, {"seed", 7}};
    std::vector<float> blob{3.5f, -1.25f, 0.0f};
    write_artifact(dir / "x.vda", "decomposition", config, {{"model_id", "m"}}, blob);
    RawArtifact first = read_artifact(dir / "x.vda", "decomposition");
    write_artifact(dir / "x.vda", "decomposition", config, {{"model_id", "m"}}, blob);
    RawArtifact second = read_artifact(dir / "x.vda", "decomposition");
    CHECK(first.blob == second.blob);
    CHECK(first.header.at("config_hash") == second.header.at("config_hash"));
}

TEST_CASE("command wrappers map failures onto the documented exit codes") {
    cmd::GlobalOpts opts;
    opts.error_json = true;
    cmd::DecomposeArgs args; // missing required paths
    CHECK(cmd::guarded<cmd::DecomposeArgs, cmd::cmd_decompose>(opts, "decompose", args) ==
          cmd::kValidation);

    TempDir dir("cli_numeric");
    ToyModel model = tiny_model(12);
    SyntheticDataset ds = tiny_dataset(13);
    std::vector<int> ids(ds.val_idx.begin(), ds.val_idx.begin() + 3);
    DecompositionSet set = decompose_dataset(model, ds, ids, {});
    set.contrib[0] += 2.0f;
    save_decomposition_set(set, {{"command", "test"}}, dir / "broken.vda");
    std::string path = dir / "broken.vda";
    CHECK(cmd::guarded<std::string, cmd::cmd_decompose_verify>(opts, "decompose verify", path) ==
          cmd::kNumeric);
}

TEST_CASE("artifact root resolution leaves absolute paths alone") {
    cmd::GlobalOpts opts;
    opts.artifact_root = "/tmp/vitdec_root";
    CHECK(cmd::resolve(opts, "x.vda") == "/tmp/vitdec_root/x.vda");
    CHECK(cmd::resolve(opts, "/abs/y.vda") == "/abs/y.vda");
    cmd::GlobalOpts dot;
    CHECK(cmd::resolve(dot, "x.vda") == "x.vda");
}
