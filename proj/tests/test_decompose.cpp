#include "vitdec/decompose.hpp"
#include "vitdec/errors.hpp"
#include "vitdec/linalg.hpp"
#include "vitdec/model.hpp"

#include <doctest.h>

#include <map>

using namespace vitdec;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, float scale = 1.0f) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = rng.gaussian(0.0f, scale);
    return t;
}

Tensor random_image(Rng& rng) {
    Tensor img({3, 32, 32});
    for (float& v : img.data) v = rng.uniform(0.0f, 1.0f);
    return img;
}

OpMeta affine_meta(const Tensor& w, const Tensor& b) {
    OpMeta m;
    m.weight = w;
    m.bias = b;
    return m;
}

/// Hand tape: z = takerow0( x + mlp(detach(x or plug)) ), no norms, so the
/// init share is independent of the component branch.
struct HandBlock {
    Tape tape;
    NodeId z_node;
};

HandBlock hand_block(const Tensor& x0, const Tensor& plug, const Tensor& w1, const Tensor& w2) {
    HandBlock hb;
    Tape& tape = hb.tape;
    tape.set_model_info("hand", 1);
    Tensor x = tape.leaf(x0);
    tape.node_mut(x.node).notes.layer_entry = 0;
    Tensor xin = tape.leaf(plug);
    Tensor xd = tape.detach(xin);
    Tensor u = tape.record(OpType::Affine, affine_meta(w1, {}), {xd});
    Tensor g = tape.record(OpType::Gelu, {}, {u});
    tape.node_mut(g.node).notes.stop_tag = "mlp";
    tape.node_mut(g.node).notes.stop_layer = 0;
    Tensor m = tape.record(OpType::Affine, affine_meta(w2, {}), {g});
    Tensor sum = tape.record(OpType::Add, {}, {x, m});
    OpMeta row;
    row.row = 0;
    Tensor z = tape.record(OpType::TakeRow, row, {sum});
    tape.set_output(z.node);
    tape.seal();
    hb.z_node = z.node;
    return hb;
}

} // namespace

TEST_CASE("vanilla component count: heads x layers + mlps + init") {
    ModelConfig cfg;
    cfg.depth = 4;
    cfg.heads = 4;
    cfg.dim = 32;
    ToyModel model = build_model(cfg);
    Rng rng(40);
    RecordedForward fwd = forward_record(model, random_image(rng));
    Decomposition dec = rep_decompose(*fwd.tape, fwd.z_node, {});
    CHECK(dec.components.size() == 4 * 4 + 4 + 1);
    CHECK(dec.contributions.size() == 21);
    int heads = 0, mlps = 0, inits = 0;
    for (const ComponentEntry& e : dec.components) {
        if (e.id.kind == ComponentId::Kind::Head) ++heads;
        if (e.id.kind == ComponentId::Kind::Mlp) ++mlps;
        if (e.id.kind == ComponentId::Kind::Init) ++inits;
    }
    CHECK(heads == 16);
    CHECK(mlps == 4);
    CHECK(inits == 1);
}

TEST_CASE("a purely linear graph decomposes to the single term z") {
    Rng rng(41);
    Tape tape;
    tape.set_model_info("linear", 0);
    Tensor x = tape.leaf(random_tensor({1, 8}, rng));
    tape.node_mut(x.node).notes.layer_entry = 0;
    Tensor w = random_tensor({8, 8}, rng);
    Tensor y = tape.record(OpType::Affine, affine_meta(w, random_tensor({8}, rng)), {x});
    OpMeta row;
    row.row = 0;
    Tensor z = tape.record(OpType::TakeRow, row, {y});
    tape.set_output(z.node);
    tape.seal();
    Decomposition dec = rep_decompose(tape, z.node, {});
    REQUIRE(dec.contributions.size() == 1);
    CHECK(dec.contributions[0].component == ComponentId::init());
    CHECK(l2_diff(dec.contributions[0].vector, dec.z) <= 1e-6);
}

TEST_CASE("reconstruction identity holds across variants, seeds and granularities") {
    Rng rng(42);
    for (Variant v :
         {Variant::VanillaCls, Variant::VanillaMeanpool, Variant::Windowed, Variant::GridBlock}) {
        for (uint64_t seed : {1ull, 2ull}) {
            ModelConfig cfg;
            cfg.variant = v;
            cfg.depth = 4;
            cfg.seed = seed;
            ToyModel model = build_model(cfg);
            RecordedForward fwd = forward_record(model, random_image(rng));
            for (Granularity g : {Granularity::Component, Granularity::ComponentToken}) {
                DecomposeOptions opts;
                opts.granularity = g;
                Decomposition dec = rep_decompose(*fwd.tape, fwd.z_node, opts);
                CHECK(dec.residual() <= 1e-5);
            }
        }
    }
}

TEST_CASE("init accumulates everything below the requested layer count") {
    ModelConfig cfg;
    cfg.depth = 4;
    ToyModel model = build_model(cfg);
    Rng rng(43);
    RecordedForward fwd = forward_record(model, random_image(rng));
    DecomposeOptions opts;
    opts.layers = 2;
    Decomposition dec = rep_decompose(*fwd.tape, fwd.z_node, opts);
    CHECK(dec.n_layers_decomposed == 2);
    CHECK(dec.components.size() == 2 * 4 + 2 + 1);
    // layer indices count from the last layer: only 00 and 01 appear
    for (const ComponentEntry& e : dec.components)
        if (e.id.kind != ComponentId::Kind::Init) CHECK(e.id.layer <= 1);
    CHECK(dec.residual() <= 1e-5);

    DecomposeOptions none;
    none.layers = 0;
    Decomposition trivial = rep_decompose(*fwd.tape, fwd.z_node, none);
    REQUIRE(trivial.contributions.size() == 1);
    CHECK(l2_diff(trivial.contributions[0].vector, trivial.z) / l2_norm(trivial.z) <= 1e-6);

    DecomposeOptions over;
    over.layers = 5;
    CHECK_THROWS_AS(rep_decompose(*fwd.tape, fwd.z_node, over), std::invalid_argument);
}

TEST_CASE("direct contributions: zeroing a detached input only moves that component") {
    Rng rng(44);
    const int T = 3, d = 8;
    Tensor x0 = random_tensor({T, d}, rng);
    Tensor w1 = random_tensor({d, d}, rng);
    Tensor w2 = random_tensor({d, d}, rng);

    HandBlock normal = hand_block(x0, x0, w1, w2);
    Tensor zeros({T, d});
    HandBlock plugged = hand_block(x0, zeros, w1, w2);

    Decomposition a = rep_decompose(normal.tape, normal.z_node, {});
    Decomposition b = rep_decompose(plugged.tape, plugged.z_node, {});
    const Contribution* init_a = a.find(ComponentId::init());
    const Contribution* init_b = b.find(ComponentId::init());
    const Contribution* mlp_a = a.find(ComponentId::mlp(0));
    const Contribution* mlp_b = b.find(ComponentId::mlp(0));
    REQUIRE(init_a);
    REQUIRE(init_b);
    REQUIRE(mlp_a);
    REQUIRE(mlp_b);
    CHECK(init_a->vector.data == init_b->vector.data); // untouched branch is identical
    CHECK(l2_diff(mlp_a->vector, mlp_b->vector) > 1e-3); // the plugged component moved
}

TEST_CASE("decomp_binary distributes adds, weighted adds and drops zero leaves") {
    Rng rng(45);
    Tape tape;
    tape.set_model_info("hand", 1);
    Tensor x = tape.leaf(random_tensor({1, 6}, rng));
    tape.node_mut(x.node).notes.layer_entry = 0;
    Tensor zero = tape.leaf(Tensor({1, 6}));
    Tensor sum = tape.record(OpType::Add, {}, {x, zero});
    OpMeta row;
    row.row = 0;
    Tensor z = tape.record(OpType::TakeRow, row, {sum});
    tape.set_output(z.node);
    tape.seal();

    // x + 0: the zero leaf contributes an empty list
    Decomposition dec = rep_decompose(tape, z.node, {});
    CHECK(dec.contributions.size() == 1);

    // library-level checks on the binary helper
    std::vector<Tensor> left{random_tensor({1, 6}, rng)}, right{random_tensor({1, 6}, rng)};
    std::vector<Tensor> out = decomp_binary(tape, sum.node, left, right);
    REQUIRE(out.size() == 2);
    Tensor total = out[0];
    add_into(total, out[1]);
    Tensor expect = left[0];
    add_into(expect, right[0]);
    CHECK(l2_diff(total, expect) <= 1e-7);

    CHECK_THROWS_AS(decomp_binary(tape, z.node, left, right), std::invalid_argument);
}

TEST_CASE("weighted add scales the scaled side's contributions") {
    Rng rng(46);
    Tape tape;
    Tensor x = tape.leaf(random_tensor({2, 4}, rng));
    Tensor y = tape.leaf(random_tensor({2, 4}, rng));
    OpMeta meta;
    meta.beta = 2.0f;
    Tensor z = tape.record(OpType::Add, meta, {x, y});
    std::vector<Tensor> out = decomp_binary(tape, z.node, {tape.value(x.node)}, {tape.value(y.node)});
    Tensor total = out[0];
    add_into(total, out[1]);
    CHECK(l2_diff(total, z) <= 1e-6);
    for (size_t i = 0; i < out[1].data.size(); ++i)
        CHECK(out[1].data[i] == doctest::Approx(2.0f * tape.value(y.node).data[i]));
}

TEST_CASE("decomp_reduction: concat slots, token means, attention matmul") {
    Rng rng(47);
    Tape tape;
    Tensor h0 = tape.leaf(random_tensor({3, 2}, rng));
    Tensor h1 = tape.leaf(random_tensor({3, 2}, rng));
    Tensor cat = tape.record(OpType::ConcatCols, {}, {h0, h1});
    std::vector<Tensor> out =
        decomp_reduction(tape, cat.node, {{tape.value(h0.node)}, {tape.value(h1.node)}});
    REQUIRE(out.size() == 2);
    CHECK(out[0].shape == cat.shape);
    Tensor total = out[0];
    add_into(total, out[1]);
    CHECK(l2_diff(total, cat) <= 1e-7);
    CHECK(out[1].at(0, 0) == 0.0f); // zero-padded into its slot
    CHECK(out[1].at(0, 2) == tape.value(h1.node).at(0, 0));

    Tensor x = tape.leaf(random_tensor({4, 6}, rng));
    Tensor mean = tape.record(OpType::MeanRows, {}, {x});
    std::vector<Tensor> terms = decomp_reduction(tape, mean.node, {{tape.value(x.node)}});
    REQUIRE(terms.size() == 4);
    Tensor acc = zeros_like(terms[0]);
    for (const Tensor& t : terms) add_into(acc, t);
    CHECK(l2_diff(acc, mean) <= 1e-6);
    for (int j = 0; j < 6; ++j) CHECK(terms[2].data[static_cast<size_t>(j)] ==
                                      doctest::Approx(x.at(2, j) / 4.0f));

    Tensor attn = tape.leaf(random_tensor({4, 5}, rng));
    Tensor ad = tape.detach(attn);
    Tensor vals = tape.leaf(random_tensor({5, 8}, rng));
    Tensor mm = tape.record(OpType::Matmul, {}, {ad, vals});
    std::vector<Tensor> prods =
        decomp_reduction(tape, mm.node, {{tape.value(ad.node)}, {tape.value(vals.node)}});
    REQUIRE(prods.size() == 5); // one term per contracted token
    Tensor mm_acc = zeros_like(prods[0]);
    for (const Tensor& t : prods) add_into(mm_acc, t);
    CHECK(l2_diff(mm_acc, mm) / l2_norm(mm) <= 1e-6);

    CHECK_THROWS_AS(decomp_reduction(tape, x.node, {{tape.value(x.node)}}), std::invalid_argument);
}

TEST_CASE("push_linear splits additive constants evenly") {
    Rng rng(48);
    Tape tape;
    Tensor x = tape.leaf(random_tensor({2, 4}, rng));
    Tensor w = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor y = tape.record(OpType::Affine, affine_meta(w, b), {x});

    Tensor c1 = random_tensor({2, 4}, rng);
    Tensor c2 = tape.value(x.node);
    for (size_t i = 0; i < c2.data.size(); ++i) c2.data[i] -= c1.data[i];
    std::vector<Tensor> pushed = push_linear(tape, y.node, {c1, c2});
    Tensor total = pushed[0];
    add_into(total, pushed[1]);
    CHECK(l2_diff(total, y) / l2_norm(y) <= 1e-6);

    Tensor g = tape.record(OpType::Gelu, {}, {x});
    CHECK_THROWS_WITH_AS(push_linear(tape, g.node, {c1}), doctest::Contains("not linear-unary"),
                         std::invalid_argument);
}

TEST_CASE("granularity coherence: reducing tokens equals requesting components") {
    ModelConfig cfg;
    cfg.depth = 2;
    ToyModel model = build_model(cfg);
    Rng rng(49);
    RecordedForward fwd = forward_record(model, random_image(rng));
    DecomposeOptions fine;
    fine.granularity = Granularity::ComponentToken;
    Decomposition tokens = rep_decompose(*fwd.tape, fwd.z_node, fine);
    Decomposition coarse = rep_decompose(*fwd.tape, fwd.z_node, {});
    Decomposition reduced = reduce_decomposition(tokens, Collapse::Tokens);

    REQUIRE(reduced.contributions.size() == coarse.contributions.size());
    for (size_t i = 0; i < reduced.contributions.size(); ++i) {
        CHECK(reduced.contributions[i].component == coarse.contributions[i].component);
        for (size_t j = 0; j < reduced.contributions[i].vector.data.size(); ++j)
            CHECK(std::abs(reduced.contributions[i].vector.data[j] -
                           coarse.contributions[i].vector.data[j]) <= 1e-6);
    }
}

TEST_CASE("reduce_decomposition collapses heads and everything") {
    ModelConfig cfg;
    cfg.depth = 2;
    ToyModel model = build_model(cfg);
    Rng rng(50);
    RecordedForward fwd = forward_record(model, random_image(rng));
    Decomposition dec = rep_decompose(*fwd.tape, fwd.z_node, {});

    Decomposition merged = reduce_decomposition(dec, Collapse::HeadsWithinLayer);
    CHECK(merged.contributions.size() == 2 + 2 + 1); // attn + mlp per layer + init
    bool has_attn = false;
    for (const Contribution& c : merged.contributions)
        has_attn = has_attn || c.component.kind == ComponentId::Kind::Attn;
    CHECK(has_attn);
    CHECK(merged.residual() <= 1e-5);

    Decomposition total = reduce_decomposition(dec, Collapse::All);
    REQUIRE(total.contributions.size() == 1);
    CHECK(l2_diff(total.contributions[0].vector, dec.z) / l2_norm(dec.z) <= 1e-5);

    CHECK_THROWS_AS(reduce_decomposition(dec, Collapse::Tokens), std::invalid_argument);
    CHECK_THROWS_AS(reduce_decomposition(merged, Collapse::HeadsWithinLayer), std::invalid_argument);
}

TEST_CASE("tokenwise head contributions match the closed-form attention terms") {
    // c_{h,t} for the last layer of a depth-1 CLS model equals
    // LN-push(zeropad_h(A_h[:,t] outer v_h[t,:]) Wo + bo/n) at the CLS row.
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.dim = 16;
    ToyModel model = build_model(cfg);
    Rng rng(51);
    RecordedForward fwd = forward_record(model, random_image(rng));
    DecomposeOptions opts;
    opts.granularity = Granularity::ComponentToken;
    Decomposition dec = rep_decompose(*fwd.tape, fwd.z_node, opts);

    const Tape& tape = *fwd.tape;
    const int T = cfg.tokens(), d = cfg.dim, H = cfg.heads, dh = d / H;
    // recover the forward pieces from the tape
    const GraphNode& take = tape.node(fwd.z_node);
    NodeId lnf_id = take.parents[0];
    FrozenLayerNorm lnf = freeze_layernorm(tape, lnf_id);
    // attention weights and values per head, read off the recorded nodes
    std::vector<Tensor> attn(static_cast<size_t>(H)), vals(static_cast<size_t>(H));
    for (size_t i = 0; i < tape.size(); ++i) {
        const GraphNode& n = tape.node(static_cast<NodeId>(i));
        if (n.op == OpType::Matmul && n.kind == NodeKind::LinearReduction) {
            // parents: (detached softmax, value slice); head = column offset
            const GraphNode& vh = tape.node(n.parents[1]);
            int head = vh.meta.col_begin / dh;
            attn[static_cast<size_t>(head)] = tape.value(n.parents[0]);
            vals[static_cast<size_t>(head)] = tape.value(n.parents[1]);
        }
    }
    const BlockParams& bp = model.blocks[0];
    const int n_share = H * T + 2; // heads*tokens + mlp + residual stream
    for (int h = 0; h < H; ++h) {
        for (int t = 0; t < T; ++t) {
            Tensor term({T, d});
            for (int q = 0; q < T; ++q)
                for (int j = 0; j < dh; ++j)
                    term.at(q, h * dh + j) = attn[static_cast<size_t>(h)].at(q, t) *
                                             vals[static_cast<size_t>(h)].at(t, j);
            Tensor proj = affine(term, bp.wo, {});
            for (int q = 0; q < T; ++q)
                for (int j = 0; j < d; ++j)
                    proj.at(q, j) += bp.bo.data[static_cast<size_t>(j)] / static_cast<float>(H * T);
            Tensor pushed = lnf.push(proj, n_share);
            const Contribution* got = dec.find(ComponentId::attn_head(0, h), t);
            REQUIRE(got);
            for (int j = 0; j < d; ++j)
                CHECK(std::abs(pushed.at(0, j) - got->vector.data[static_cast<size_t>(j)]) <=
                      1e-5 * std::max(1.0, l2_norm(got->vector)));
        }
    }
}

TEST_CASE("an untagged nonlinear stop aborts with a node report") {
    Rng rng(52);
    Tape tape;
    tape.set_model_info("hand", 1);
    Tensor x = tape.leaf(random_tensor({1, 4}, rng));
    tape.node_mut(x.node).notes.layer_entry = 0;
    Tensor g = tape.record(OpType::Gelu, {}, {x}); // no stop tag
    Tensor sum = tape.record(OpType::Add, {}, {x, g});
    OpMeta row;
    row.row = 0;
    Tensor z = tape.record(OpType::TakeRow, row, {sum});
    tape.set_output(z.node);
    tape.seal();
    CHECK_THROWS_WITH_AS(rep_decompose(tape, z.node, {}), doctest::Contains("unattributed"),
                         std::runtime_error);
}

TEST_CASE("component labels and canonical order") {
    CHECK(ComponentId::init().label() == "init");
    CHECK(ComponentId::mlp(3).label() == "mlp03");
    CHECK(ComponentId::attn_head(0, 2).label() == "head00.2");
    CHECK(ComponentId::attn_merged(1).label() == "attn01");
    CHECK(ComponentId::opaque(2, "conv").label() == "conv02");
    CHECK(parse_component_label("head00.2") == ComponentId::attn_head(0, 2));
    CHECK(parse_component_label("conv02") == ComponentId::opaque(2, "conv"));
    CHECK(parse_component_label("init") == ComponentId::init());
    CHECK(ComponentId::init() < ComponentId::attn_head(0, 0));
    CHECK(ComponentId::attn_head(0, 1) < ComponentId::attn_head(0, 2));
    CHECK(ComponentId::attn_head(0, 3) < ComponentId::mlp(0));
    CHECK(ComponentId::mlp(0) < ComponentId::attn_head(1, 0));
}
