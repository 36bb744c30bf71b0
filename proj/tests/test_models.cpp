#include "vitdec/dataset.hpp"
#include "vitdec/linalg.hpp"
#include "vitdec/model.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace vitdec;

namespace {

Tensor random_image(Rng& rng, int size = 32) {
    Tensor img({3, size, size});
    for (float& v : img.data) v = rng.uniform(0.0f, 1.0f);
    return img;
}

DatasetSpec small_spec(uint64_t seed, double rho = 0.5) {
    DatasetSpec spec;
    spec.n_train = 240;
    spec.n_val = 120;
    spec.n_test = 120;
    spec.rho_train = rho;
    spec.seed = seed;
    return spec;
}

} // namespace

TEST_CASE("build_model is deterministic and validates configs") {
    ModelConfig cfg;
    cfg.seed = 9;
    ToyModel a = build_model(cfg);
    ToyModel b = build_model(cfg);
    CHECK(a.patch_w.data == b.patch_w.data);
    CHECK(a.blocks[2].w1.data == b.blocks[2].w1.data);

    ModelConfig bad = cfg;
    bad.dim = 30; // not divisible by heads=4
    CHECK_THROWS_AS(build_model(bad), std::invalid_argument);
    ModelConfig bad2 = cfg;
    bad2.variant = Variant::Windowed;
    bad2.window = 3;
    CHECK_THROWS_AS(build_model(bad2), std::invalid_argument);
}

TEST_CASE("every variant records only classifiable nodes with sound metadata") {
    Rng rng(21);
    Tensor img = random_image(rng);
    for (Variant v :
         {Variant::VanillaCls, Variant::VanillaMeanpool, Variant::Windowed, Variant::GridBlock}) {
        ModelConfig cfg;
        cfg.variant = v;
        cfg.depth = 4;
        cfg.seed = 7;
        ToyModel model = build_model(cfg);
        RecordedForward fwd = forward_record(model, img);
        CHECK(all_finite(fwd.z));
        for (size_t i = 0; i < fwd.tape->size(); ++i) {
            const GraphNode& n = fwd.tape->node(static_cast<NodeId>(i));
            bool known = n.kind == NodeKind::LinearUnary || n.kind == NodeKind::LinearReduction ||
                         n.kind == NodeKind::LinearBinary || n.kind == NodeKind::Nonlinear ||
                         n.kind == NodeKind::Leaf || n.kind == NodeKind::Detach;
            CHECK(known);
            if (n.kind == NodeKind::LinearReduction) {
                bool has_axis = n.meta.axis >= 0 || !n.meta.offsets.empty();
                CHECK(has_axis);
            }
        }
        CHECK(fwd.tape->replay_matches());
    }
}

TEST_CASE("windowed variant records patch-merge reduction nodes between stages") {
    ModelConfig cfg;
    cfg.variant = Variant::Windowed;
    cfg.depth = 4;
    cfg.window = 2;
    ToyModel model = build_model(cfg);
    CHECK(cfg.merges());
    Rng rng(22);
    RecordedForward fwd = forward_record(model, random_image(rng));
    // the merge concatenates four row-selected slices into channel blocks
    bool merge_concat = false;
    for (size_t i = 0; i < fwd.tape->size(); ++i) {
        const GraphNode& n = fwd.tape->node(static_cast<NodeId>(i));
        if (n.op == OpType::ConcatCols && n.parents.size() == 4 &&
            n.kind == NodeKind::LinearReduction && n.notes.head_group_layer < 0)
            merge_concat = true;
    }
    CHECK(merge_concat);
    CHECK(fwd.z.dim(0) == 2 * cfg.dim);
}

TEST_CASE("gridblock variant alternates attention partitions and records conv stops") {
    ModelConfig cfg;
    cfg.variant = Variant::GridBlock;
    cfg.depth = 2;
    ToyModel model = build_model(cfg);
    Rng rng(23);
    RecordedForward fwd = forward_record(model, random_image(rng));
    int conv_nodes = 0;
    for (size_t i = 0; i < fwd.tape->size(); ++i) {
        const GraphNode& n = fwd.tape->node(static_cast<NodeId>(i));
        if (n.op == OpType::TokenConv) {
            CHECK(n.kind == NodeKind::Nonlinear);
            CHECK(n.notes.stop_tag == "conv");
            ++conv_nodes;
        }
    }
    CHECK(conv_nodes == cfg.depth);
}

TEST_CASE("mean-pooled variant: z is the token mean of the final norm") {
    ModelConfig cfg;
    cfg.variant = Variant::VanillaMeanpool;
    ToyModel model = build_model(cfg);
    Rng rng(24);
    RecordedForward fwd = forward_record(model, random_image(rng));
    const GraphNode& pool = fwd.tape->node(fwd.z_node);
    CHECK(pool.op == OpType::MeanRows);
    CHECK(pool.kind == NodeKind::LinearReduction);
    const Tensor& pre = fwd.tape->value(pool.parents[0]);
    Tensor mean({pre.dim(1)});
    for (int j = 0; j < pre.dim(1); ++j) {
        float acc = 0.0f;
        for (int r = 0; r < pre.dim(0); ++r) acc += pre.at(r, j);
        mean.data[static_cast<size_t>(j)] = acc / static_cast<float>(pre.dim(0));
    }
    CHECK(l2_diff(mean, fwd.z) / l2_norm(fwd.z) <= 1e-6);
}

TEST_CASE("windowed attention with full-grid window degenerates to vanilla") {
    ModelConfig vanilla;
    vanilla.variant = Variant::VanillaMeanpool;
    vanilla.depth = 4;
    vanilla.seed = 31;
    ModelConfig windowed = vanilla;
    windowed.variant = Variant::Windowed;
    windowed.window = vanilla.patch_grid; // single window, no merge
    windowed.shift_windows = false;
    CHECK_FALSE(windowed.merges());

    ToyModel mv = build_model(vanilla);
    ToyModel mw = build_model(windowed);
    CHECK(mv.blocks[0].wq.data == mw.blocks[0].wq.data); // identical weights

    Rng rng(25);
    for (int trial = 0; trial < 3; ++trial) {
        Tensor img = random_image(rng);
        Tensor zv = forward_record(mv, img).z;
        Tensor zw = forward_record(mw, img).z;
        CHECK(l2_diff(zv, zw) / l2_norm(zv) <= 1e-5);
    }
}

TEST_CASE("plain forward matches the recorded forward") {
    Rng rng(26);
    for (Variant v : {Variant::VanillaCls, Variant::VanillaMeanpool}) {
        ModelConfig cfg;
        cfg.variant = v;
        cfg.seed = 13;
        ToyModel model = build_model(cfg);
        Tensor img = random_image(rng);
        Tensor z_plain = represent(model, img);
        Tensor z_rec = forward_record(model, img).z;
        CHECK(l2_diff(z_plain, z_rec) / l2_norm(z_rec) <= 1e-6);
    }
}

TEST_CASE("gen_synthetic is deterministic and honours the correlation knob") {
    DatasetSpec spec = small_spec(77, 0.95);
    SyntheticDataset a = gen_synthetic(spec);
    SyntheticDataset b = gen_synthetic(spec);
    REQUIRE(a.size() == b.size());
    for (int i = 0; i < a.size(); ++i) CHECK(a.images[static_cast<size_t>(i)].data == b.images[static_cast<size_t>(i)].data);
    CHECK(a.labels == b.labels);
    CHECK(a.groups == b.groups);

    // >= 93% of class-0 train images share background 0 at rho = 0.95
    int n0 = 0, match = 0;
    for (int i : a.train_idx) {
        if (a.labels[static_cast<size_t>(i)] != 0) continue;
        ++n0;
        if (a.groups[static_cast<size_t>(i)] == 0) ++match;
    }
    CHECK(static_cast<double>(match) / n0 >= 0.93);
}

TEST_CASE("rho = 0.5 passes a chi-square independence check") {
    DatasetSpec spec = small_spec(78, 0.5);
    spec.n_train = 1600;
    SyntheticDataset ds = gen_synthetic(spec);
    // 4x2 contingency table over the train split
    double table[4][2] = {};
    for (int i : ds.train_idx) table[ds.labels[static_cast<size_t>(i)]][ds.groups[static_cast<size_t>(i)]] += 1.0;
    double rows[4] = {}, cols[2] = {}, total = 0;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 2; ++c) {
            rows[r] += table[r][c];
            cols[c] += table[r][c];
            total += table[r][c];
        }
    double chi2 = 0.0;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 2; ++c) {
            double expected = rows[r] * cols[c] / total;
            double diff = table[r][c] - expected;
            chi2 += diff * diff / expected;
        }
    // df = (4-1)(2-1) = 3, alpha = 0.01 critical value
    CHECK(chi2 <= 11.345);
}

TEST_CASE("dataset round-trips through its directory format bit-exactly") {
    DatasetSpec spec = small_spec(79);
    spec.n_train = 40;
    spec.n_val = 20;
    spec.n_test = 20;
    SyntheticDataset ds = gen_synthetic(spec);
    std::string dir = "./tmp_dataset_roundtrip";
    save_dataset(ds, dir);
    SyntheticDataset loaded = load_dataset(dir);
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.groups == ds.groups);
    CHECK(loaded.train_idx == ds.train_idx);
    for (int i = 0; i < ds.size(); ++i)
        CHECK(loaded.images[static_cast<size_t>(i)].data == ds.images[static_cast<size_t>(i)].data);
}

TEST_CASE("patchify flattens raster patches channel-major") {
    Tensor img({3, 8, 8});
    Rng rng(80);
    for (float& v : img.data) v = rng.uniform(0.0f, 1.0f);
    Tensor rows = patchify(img, 2);
    CHECK(rows.shape == std::vector<int>{4, 48});
    // patch (1,0), channel 2, pixel (1,3): y = 5, x = 3
    float expect = img.data[2 * 64 + 5 * 8 + 3];
    CHECK(rows.at(2, 2 * 16 + 1 * 4 + 3) == expect);
}

TEST_CASE("untrained model sits at chance; a short run learns the toy task") {
    DatasetSpec spec = small_spec(81);
    SyntheticDataset ds = gen_synthetic(spec);
    ModelConfig cfg;
    cfg.seed = 3;
    ToyModel model = build_model(cfg);
    float acc0 = evaluate(model, ds, ds.val_idx, TrainTarget::Foreground);
    CHECK(acc0 >= 0.25f - 0.06f);
    CHECK(acc0 <= 0.25f + 0.06f);

    TrainConfig tc;
    tc.epochs = 16;
    tc.lr = 1e-3f;
    tc.seed = 5;
    TrainResult result = train_toy(model, ds, tc);
    CHECK(result.val_accuracy >= 0.6f);
    CHECK(result.loss_curve.front() > result.loss_curve.back());
}

TEST_CASE("training rejects analysis-only variants and bad heads") {
    DatasetSpec spec = small_spec(82);
    spec.n_train = 16;
    spec.n_val = 8;
    spec.n_test = 8;
    SyntheticDataset ds = gen_synthetic(spec);
    ModelConfig cfg;
    cfg.variant = Variant::Windowed;
    ToyModel model = build_model(cfg);
    TrainConfig tc;
    CHECK_THROWS_AS(train_toy(model, ds, tc), std::invalid_argument);

    ModelConfig cfg2;
    cfg2.n_classes = 3; // neither 4 (fg) nor 2 (bg) nor 8 (group)
    ToyModel model2 = build_model(cfg2);
    CHECK_THROWS_AS(train_toy(model2, ds, tc), std::invalid_argument);
}

TEST_CASE("prototypes are unit-norm class means in the encoder space") {
    DatasetSpec spec = small_spec(83);
    spec.n_train = 64;
    spec.n_val = 16;
    spec.n_test = 16;
    SyntheticDataset ds = gen_synthetic(spec);
    ModelConfig cfg;
    cfg.seed = 11;
    ToyModel model = build_model(cfg);
    PrototypeTable table = compute_prototypes(model, ds, ds.train_idx);
    REQUIRE(table.rows.size() == 6); // 4 fg + 2 bg
    CHECK(table.features[0] == "foreground");
    CHECK(table.features[5] == "background");

    std::vector<Tensor> reps = represent_batch(model, ds, ds.train_idx);
    for (size_t p = 0; p < table.rows.size(); ++p) {
        CHECK(std::abs(l2_norm(table.rows[p]) - 1.0) <= 1e-5);
        // cosine(prototype, raw class mean) stays high by construction
        Tensor mean({model.cfg.final_dim()});
        int count = 0;
        for (size_t i = 0; i < reps.size(); ++i) {
            int img = ds.train_idx[i];
            int label = table.features[p] == "foreground" ? ds.labels[static_cast<size_t>(img)]
                                                          : ds.groups[static_cast<size_t>(img)];
            std::string name = (table.features[p] == "foreground" ? "fg" : "bg") + std::to_string(label);
            if (name != table.names[p]) continue;
            add_into(mean, reps[i]);
            ++count;
        }
        REQUIRE(count > 0);
        for (float& v : mean.data) v /= static_cast<float>(count);
        CHECK(cosine(table.rows[p], mean) >= 0.9);
    }
}
