#include "vitdec/model.hpp"

#include "vitdec/errors.hpp"
#include "vitdec/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <thread>
#include <numeric>
#include <sstream>

namespace vitdec {

Variant variant_from_string(const std::string& s) {
    if (s == "vanilla-cls") return Variant::VanillaCls;
    if (s == "vanilla-meanpool") return Variant::VanillaMeanpool;
    if (s == "windowed") return Variant::Windowed;
    if (s == "gridblock") return Variant::GridBlock;
    throw std::invalid_argument("unknown model variant: " + s);
}

const char* to_string(Variant v) {
    switch (v) {
        case Variant::VanillaCls: return "vanilla-cls";
        case Variant::VanillaMeanpool: return "vanilla-meanpool";
        case Variant::Windowed: return "windowed";
        case Variant::GridBlock: return "gridblock";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (depth < 1) throw std::invalid_argument("model config: depth < 1");
    if (dim % heads != 0) throw std::invalid_argument("model config: dim not divisible by heads");
    if (image_size % patch_grid != 0) throw std::invalid_argument("model config: patch_grid does not tile image");
    if ((variant == Variant::Windowed || variant == Variant::GridBlock) && patch_grid % window != 0)
        throw std::invalid_argument("model config: window does not tile patch_grid");
    if (variant == Variant::Windowed && merges() && depth < 2)
        throw std::invalid_argument("model config: windowed merge needs depth >= 2");
    if (variant == Variant::GridBlock && patch_grid < 3)
        throw std::invalid_argument("model config: gridblock needs patch_grid >= 3");
}

std::string ModelConfig::id() const {
    std::ostringstream out;
    out << to_string(variant) << "_d" << dim << "_L" << depth << "_H" << heads << "_g" << patch_grid;
    if (variant == Variant::Windowed || variant == Variant::GridBlock)
        out << "_w" << window << (shift_windows ? "s" : "");
    out << "_s" << seed;
    return out.str();
}

namespace {

Tensor gauss(Rng& rng, std::vector<int> shape, float stddev) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = rng.gaussian(0.0f, stddev);
    return t;
}

Tensor ones(int n) {
    Tensor t({n});
    for (float& v : t.data) v = 1.0f;
    return t;
}

float xavier(int fan_in, int fan_out) { return std::sqrt(2.0f / static_cast<float>(fan_in + fan_out)); }

} // namespace

ToyModel build_model(const ModelConfig& cfg) {
    cfg.validate();
    ToyModel m;
    m.cfg = cfg;
    Rng rng(Rng::mix(cfg.seed, 0xA11CE));
    const int d = cfg.dim;

    // Draw order is fixed; variants sharing (depth, heads, dim) and pooling
    // produce identical block weights from the same seed.
    m.patch_w = gauss(rng, {cfg.patch_dim(), d}, xavier(cfg.patch_dim(), d));
    m.patch_b = Tensor({d});
    if (cfg.has_cls()) m.cls = gauss(rng, {1, d}, 0.02f);
    m.pos = gauss(rng, {cfg.tokens(), d}, 0.02f);

    int width = d;
    for (int l = 0; l < cfg.depth; ++l) {
        // patch merge doubles the stream width between the two stages
        if (cfg.merges() && l == cfg.depth / 2) {
            m.merge.ln_g = ones(4 * width);
            m.merge.ln_b = Tensor({4 * width});
            m.merge.w = gauss(rng, {4 * width, 2 * width}, xavier(4 * width, 2 * width));
            width *= 2;
        }
        BlockParams b;
        b.ln1_g = ones(width);
        b.ln1_b = Tensor({width});
        b.wq = gauss(rng, {width, width}, xavier(width, width));
        b.bq = Tensor({width});
        b.wk = gauss(rng, {width, width}, xavier(width, width));
        b.bk = Tensor({width});
        b.wv = gauss(rng, {width, width}, xavier(width, width));
        b.bv = Tensor({width});
        b.wo = gauss(rng, {width, width}, xavier(width, width));
        b.bo = Tensor({width});
        b.ln2_g = ones(width);
        b.ln2_b = Tensor({width});
        b.w1 = gauss(rng, {width, 4 * width}, xavier(width, 4 * width));
        b.b1 = Tensor({4 * width});
        b.w2 = gauss(rng, {4 * width, width}, xavier(4 * width, width));
        b.b2 = Tensor({width});
        if (cfg.variant == Variant::GridBlock) {
            b.conv_w1 = gauss(rng, {width, width}, xavier(width, width));
            b.conv_b1 = Tensor({width});
            b.conv_w2 = gauss(rng, {width, width}, xavier(width, width));
            b.conv_b2 = Tensor({width});
        }
        m.blocks.push_back(std::move(b));
    }
    const int fd = cfg.final_dim();
    m.lnf_g = ones(fd);
    m.lnf_b = Tensor({fd});
    m.head_w = gauss(rng, {fd, cfg.n_classes}, xavier(fd, cfg.n_classes));
    m.head_b = Tensor({cfg.n_classes});
    return m;
}

void visit_params(ToyModel& m, const std::function<void(Tensor&)>& fn) {
    fn(m.patch_w);
    fn(m.patch_b);
    if (!m.cls.data.empty()) fn(m.cls);
    fn(m.pos);
    for (BlockParams& b : m.blocks) {
        fn(b.ln1_g);
        fn(b.ln1_b);
        fn(b.wq);
        fn(b.bq);
        fn(b.wk);
        fn(b.bk);
        fn(b.wv);
        fn(b.bv);
        fn(b.wo);
        fn(b.bo);
        fn(b.ln2_g);
        fn(b.ln2_b);
        fn(b.w1);
        fn(b.b1);
        fn(b.w2);
        fn(b.b2);
        if (!b.conv_w1.data.empty()) {
            fn(b.conv_w1);
            fn(b.conv_b1);
            fn(b.conv_w2);
            fn(b.conv_b2);
        }
    }
    if (!m.merge.w.data.empty()) {
        fn(m.merge.ln_g);
        fn(m.merge.ln_b);
        fn(m.merge.w);
    }
    fn(m.lnf_g);
    fn(m.lnf_b);
    fn(m.head_w);
    fn(m.head_b);
}

void visit_params(const ToyModel& m, const std::function<void(const Tensor&)>& fn) {
    visit_params(const_cast<ToyModel&>(m), [&](Tensor& t) { fn(t); });
}

Tensor embed_image(const ToyModel& m, const Tensor& image) {
    Tensor patches = patchify(image, m.cfg.patch_grid);
    Tensor emb = affine(patches, m.patch_w, m.patch_b); // (g*g, d)
    const int T = m.cfg.tokens();
    Tensor x({T, m.cfg.dim});
    int row0 = 0;
    if (m.cfg.has_cls()) {
        for (int j = 0; j < m.cfg.dim; ++j) x.at(0, j) = m.cls.at(0, j) + m.pos.at(0, j);
        row0 = 1;
    }
    for (int r = 0; r < emb.dim(0); ++r)
        for (int j = 0; j < m.cfg.dim; ++j) x.at(row0 + r, j) = emb.at(r, j) + m.pos.at(row0 + r, j);
    return x;
}

// --- partition helpers -------------------------------------------------------

namespace {

/// Window partition of a g x g raster into (g/w)^2 windows of w*w tokens,
/// optionally cyclically shifted by w/2 in both directions.
std::vector<std::vector<int>> window_partition(int g, int w, int shift) {
    std::vector<std::vector<int>> parts;
    for (int wy = 0; wy < g / w; ++wy)
        for (int wx = 0; wx < g / w; ++wx) {
            std::vector<int> rows;
            for (int iy = 0; iy < w; ++iy)
                for (int ix = 0; ix < w; ++ix) {
                    int y = (wy * w + iy + shift) % g;
                    int x = (wx * w + ix + shift) % g;
                    rows.push_back(y * g + x);
                }
            parts.push_back(std::move(rows));
        }
    return parts;
}

/// Grid partition: tokens sharing the same within-window offset attend
/// together (one group per offset, strided across windows).
std::vector<std::vector<int>> grid_partition(int g, int w) {
    std::vector<std::vector<int>> parts;
    for (int iy = 0; iy < w; ++iy)
        for (int ix = 0; ix < w; ++ix) {
            std::vector<int> rows;
            for (int wy = 0; wy < g / w; ++wy)
                for (int wx = 0; wx < g / w; ++wx) rows.push_back((wy * w + iy) * g + wx * w + ix);
            parts.push_back(std::move(rows));
        }
    return parts;
}

struct RecordCtx {
    Tape& tape;
    const ToyModel& m;
};

Tensor record_affine(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    OpMeta meta;
    meta.weight = w;
    meta.bias = b;
    return tape.record(OpType::Affine, std::move(meta), {x});
}

Tensor record_layernorm(Tape& tape, const Tensor& x, const Tensor& g, const Tensor& b) {
    OpMeta meta;
    meta.ln.gamma = g;
    meta.ln.beta = b;
    return tape.record(OpType::LayerNorm, std::move(meta), {x});
}

Tensor record_add(Tape& tape, const Tensor& a, const Tensor& b) {
    return tape.record(OpType::Add, {}, {a, b});
}

/// Attention sublayer over an arbitrary token partition. `parts` lists the
/// global token rows of each attention group; heads concatenate per group
/// and the stream is reassembled in raster order.
Tensor record_attention(RecordCtx& ctx, const Tensor& x_stream, const BlockParams& bp, int layer,
                        const std::vector<std::vector<int>>& parts, int token_grid, bool has_cls) {
    Tape& tape = ctx.tape;
    const int width = x_stream.dim(1);
    const int heads = ctx.m.cfg.heads;
    const int dh = width / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor xd = tape.detach(x_stream);
    Tensor h = record_layernorm(tape, xd, bp.ln1_g, bp.ln1_b);
    Tensor q = record_affine(tape, h, bp.wq, bp.bq);
    Tensor k = record_affine(tape, h, bp.wk, bp.bk);
    Tensor v = record_affine(tape, h, bp.wv, bp.bv);

    const bool trivial = parts.size() == 1 && [&] {
        for (size_t i = 0; i < parts[0].size(); ++i)
            if (parts[0][i] != static_cast<int>(i)) return false;
        return parts[0].size() == static_cast<size_t>(x_stream.dim(0));
    }();

    auto take_rows = [&](const Tensor& t, const std::vector<int>& rows) {
        if (trivial) return t;
        OpMeta meta;
        meta.rows = rows;
        return tape.record(OpType::SelectRows, std::move(meta), {t});
    };

    std::vector<Tensor> group_outs;
    for (const std::vector<int>& rows : parts) {
        Tensor qw = take_rows(q, rows), kw = take_rows(k, rows), vw = take_rows(v, rows);
        std::vector<Tensor> head_outs;
        for (int hd = 0; hd < heads; ++hd) {
            OpMeta sl;
            sl.col_begin = hd * dh;
            sl.col_end = (hd + 1) * dh;
            Tensor qh = tape.record(OpType::SliceCols, sl, {qw});
            Tensor kh = tape.record(OpType::SliceCols, sl, {kw});
            Tensor vh = tape.record(OpType::SliceCols, sl, {vw});
            Tensor kt = tape.record(OpType::Transpose, {}, {kh});
            Tensor scores = tape.record(OpType::Matmul, {}, {qh, kt});
            OpMeta sc;
            sc.alpha = scale;
            Tensor scaled = tape.record(OpType::Scale, sc, {scores});
            Tensor attn = tape.record(OpType::Softmax, {}, {scaled});
            Tensor attn_frozen = tape.detach(attn); // weights become constants
            Tensor oh = tape.record(OpType::Matmul, {}, {attn_frozen, vh});
            NodeNotes& notes = tape.node_mut(oh.node).notes;
            notes.token_unbind = true;
            notes.token_map = rows;
            notes.token_grid = token_grid;
            notes.has_cls = has_cls;
            head_outs.push_back(oh);
        }
        Tensor grouped = tape.record(OpType::ConcatCols, {}, head_outs);
        tape.node_mut(grouped.node).notes.head_group_layer = layer;
        group_outs.push_back(grouped);
    }

    Tensor merged;
    if (group_outs.size() == 1 && trivial) {
        merged = group_outs[0];
    } else {
        Tensor stacked = tape.record(OpType::ConcatRows, {}, group_outs);
        // restore raster order
        std::vector<int> inv(static_cast<size_t>(x_stream.dim(0)));
        int pos = 0;
        for (const std::vector<int>& rows : parts)
            for (int r : rows) inv[static_cast<size_t>(r)] = pos++;
        OpMeta meta;
        meta.rows.assign(inv.begin(), inv.end());
        merged = tape.record(OpType::SelectRows, std::move(meta), {stacked});
    }
    Tensor proj = record_affine(tape, merged, bp.wo, bp.bo);
    return record_add(tape, x_stream, proj);
}

Tensor record_mlp(RecordCtx& ctx, const Tensor& x_stream, const BlockParams& bp, int layer) {
    Tape& tape = ctx.tape;
    Tensor xd = tape.detach(x_stream);
    Tensor h = record_layernorm(tape, xd, bp.ln2_g, bp.ln2_b);
    Tensor u = record_affine(tape, h, bp.w1, bp.b1);
    Tensor g = tape.record(OpType::Gelu, {}, {u});
    NodeNotes& notes = tape.node_mut(g.node).notes;
    notes.stop_tag = "mlp";
    notes.stop_layer = layer;
    Tensor out = record_affine(tape, g, bp.w2, bp.b2);
    return record_add(tape, x_stream, out);
}

Tensor record_conv(RecordCtx& ctx, const Tensor& x_stream, const BlockParams& bp, int layer, int grid) {
    Tape& tape = ctx.tape;
    Tensor xd = tape.detach(x_stream);
    OpMeta meta;
    meta.conv_w1 = bp.conv_w1;
    meta.conv_b1 = bp.conv_b1;
    meta.conv_w2 = bp.conv_w2;
    meta.conv_b2 = bp.conv_b2;
    meta.grid = grid;
    Tensor c = tape.record(OpType::TokenConv, std::move(meta), {xd});
    NodeNotes& notes = tape.node_mut(c.node).notes;
    notes.stop_tag = "conv";
    notes.stop_layer = layer;
    return record_add(tape, x_stream, c);
}

/// Patch merging: the four 2x2 spatial offsets become channel blocks,
/// then LayerNorm and a width-halving linear map (4d -> 2d).
Tensor record_merge(RecordCtx& ctx, const Tensor& x_stream, int grid) {
    Tape& tape = ctx.tape;
    const int half = grid / 2;
    std::vector<Tensor> slices;
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            OpMeta meta;
            for (int r = 0; r < half; ++r)
                for (int c = 0; c < half; ++c) meta.rows.push_back((2 * r + dy) * grid + (2 * c + dx));
            slices.push_back(tape.record(OpType::SelectRows, std::move(meta), {x_stream}));
        }
    Tensor cat = tape.record(OpType::ConcatCols, {}, slices);
    Tensor h = record_layernorm(tape, cat, ctx.m.merge.ln_g, ctx.m.merge.ln_b);
    return record_affine(tape, h, ctx.m.merge.w, {});
}

} // namespace

RecordedForward forward_record(const ToyModel& m, const Tensor& image) {
    const ModelConfig& cfg = m.cfg;
    cfg.validate();
    RecordedForward out;
    out.tape = std::make_shared<Tape>();
    Tape& tape = *out.tape;
    tape.set_model_info(cfg.id(), cfg.depth);
    RecordCtx ctx{tape, m};

    Tensor x = tape.leaf(embed_image(m, image));
    int grid = cfg.patch_grid;
    const bool cls = cfg.has_cls();

    for (int l = 0; l < cfg.depth; ++l) {
        tape.node_mut(x.node).notes.layer_entry = l;
        const BlockParams& bp = m.blocks[static_cast<size_t>(l)];
        switch (cfg.variant) {
            case Variant::VanillaCls:
            case Variant::VanillaMeanpool: {
                std::vector<int> all(static_cast<size_t>(x.dim(0)));
                std::iota(all.begin(), all.end(), 0);
                x = record_attention(ctx, x, bp, l, {all}, grid, cls);
                x = record_mlp(ctx, x, bp, l);
                break;
            }
            case Variant::Windowed: {
                int w = std::min(cfg.window, grid);
                int shift = (cfg.shift_windows && w < grid && (l % 2 == 1)) ? w / 2 : 0;
                x = record_attention(ctx, x, bp, l, window_partition(grid, w, shift), grid, false);
                x = record_mlp(ctx, x, bp, l);
                if (cfg.merges() && l + 1 == cfg.depth / 2) {
                    x = record_merge(ctx, x, grid);
                    grid /= 2;
                }
                break;
            }
            case Variant::GridBlock: {
                x = record_conv(ctx, x, bp, l, grid);
                auto parts = (l % 2 == 0) ? window_partition(grid, cfg.window, 0)
                                          : grid_partition(grid, cfg.window);
                x = record_attention(ctx, x, bp, l, parts, grid, false);
                x = record_mlp(ctx, x, bp, l);
                break;
            }
        }
    }
    tape.node_mut(x.node).notes.layer_entry = cfg.depth;

    Tensor hf = record_layernorm(tape, x, m.lnf_g, m.lnf_b);
    Tensor z;
    if (cls) {
        OpMeta meta;
        meta.row = 0;
        z = tape.record(OpType::TakeRow, std::move(meta), {hf});
    } else {
        z = tape.record(OpType::MeanRows, {}, {hf});
        NodeNotes& notes = tape.node_mut(z.node).notes;
        notes.token_unbind = true;
        notes.token_grid = grid;
        notes.has_cls = false;
    }
    tape.set_output(z.node);
    tape.seal();
    out.z_node = z.node;
    out.z = z;
    out.z.node = kNoNode;
    out.logits = logits_from(m, out.z);
    return out;
}

Tensor logits_from(const ToyModel& m, const Tensor& z) {
    Tensor z2 = z;
    z2.shape = {1, z.dim(0)};
    Tensor logits = affine(z2, m.head_w, m.head_b);
    logits.shape = {m.cfg.n_classes};
    return logits;
}

int predict_from(const ToyModel& m, const Tensor& z) {
    Tensor logits = logits_from(m, z);
    return static_cast<int>(std::max_element(logits.data.begin(), logits.data.end()) - logits.data.begin());
}

// --- trainer (vanilla variants) ----------------------------------------------

namespace {

struct BlockCache {
    Tensor x_in, h1, mu1, sg1, q, k, v;
    std::vector<Tensor> attn; // per head (T,T)
    Tensor cat, attn_out, x_mid, h2, mu2, sg2, u, g, mlp_out, x_out;
};

struct ForwardCache {
    Tensor x0;
    std::vector<BlockCache> blocks;
    Tensor hf, muf, sgf, z, logits;
};

bool trainable(const ModelConfig& cfg) {
    return cfg.variant == Variant::VanillaCls || cfg.variant == Variant::VanillaMeanpool;
}

/// Same kernels and evaluation order as the recorded forward, minus the tape.
void vanilla_forward(const ToyModel& m, const Tensor& x0, ForwardCache& fc) {
    const int T = x0.dim(0), d = x0.dim(1);
    const int H = m.cfg.heads, dh = d / H;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    fc.x0 = x0;
    fc.blocks.resize(m.blocks.size());
    Tensor x = x0;
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const BlockParams& bp = m.blocks[l];
        BlockCache& bc = fc.blocks[l];
        bc.x_in = x;
        bc.h1 = layernorm_fwd(x, bp.ln1_g, bp.ln1_b, 1e-5f, &bc.mu1, &bc.sg1);
        bc.q = affine(bc.h1, bp.wq, bp.bq);
        bc.k = affine(bc.h1, bp.wk, bp.bk);
        bc.v = affine(bc.h1, bp.wv, bp.bv);
        bc.attn.assign(static_cast<size_t>(H), Tensor());
        bc.cat = Tensor({T, d});
        for (int hd = 0; hd < H; ++hd) {
            const int off = hd * dh;
            Tensor scores({T, T});
            for (int i = 0; i < T; ++i)
                for (int j = 0; j < T; ++j) {
                    float acc = 0.0f;
                    for (int t = 0; t < dh; ++t) acc += bc.q.at(i, off + t) * bc.k.at(j, off + t);
                    scores.at(i, j) = acc;
                }
            for (float& vv : scores.data) vv *= scale;
            softmax_rows_inplace(scores);
            bc.attn[static_cast<size_t>(hd)] = scores;
            for (int i = 0; i < T; ++i)
                for (int j = 0; j < dh; ++j) {
                    float acc = 0.0f;
                    for (int t = 0; t < T; ++t) acc += scores.at(i, t) * bc.v.at(t, off + j);
                    bc.cat.at(i, off + j) = acc;
                }
        }
        bc.attn_out = affine(bc.cat, bp.wo, bp.bo);
        bc.x_mid = bc.x_in;
        add_into(bc.x_mid, bc.attn_out);
        bc.h2 = layernorm_fwd(bc.x_mid, bp.ln2_g, bp.ln2_b, 1e-5f, &bc.mu2, &bc.sg2);
        bc.u = affine(bc.h2, bp.w1, bp.b1);
        bc.g = bc.u;
        for (float& vv : bc.g.data) vv = gelu_value(vv);
        bc.mlp_out = affine(bc.g, bp.w2, bp.b2);
        bc.x_out = bc.x_mid;
        add_into(bc.x_out, bc.mlp_out);
        x = bc.x_out;
    }
    fc.hf = layernorm_fwd(x, m.lnf_g, m.lnf_b, 1e-5f, &fc.muf, &fc.sgf);
    if (m.cfg.has_cls()) {
        fc.z = Tensor({d});
        for (int j = 0; j < d; ++j) fc.z.data[j] = fc.hf.at(0, j);
    } else {
        fc.z = Tensor({d});
        const float inv = 1.0f / static_cast<float>(T);
        for (int j = 0; j < d; ++j) {
            float acc = 0.0f;
            for (int r = 0; r < T; ++r) acc += fc.hf.at(r, j);
            fc.z.data[j] = acc * inv;
        }
    }
    fc.logits = logits_from(m, fc.z);
}

/// Gradients mirror of the parameters. Same shapes, flat list order.
struct Grads {
    ToyModel g;
    explicit Grads(const ToyModel& m) : g(m) {
        visit([](Tensor& t) { std::fill(t.data.begin(), t.data.end(), 0.0f); });
    }
    void visit(const std::function<void(Tensor&)>& fn) { visit_params(g, fn); }
};

/// dX for y = gamma*(x-mu)/sigma + beta given dY; accumulates dgamma/dbeta.
Tensor layernorm_bwd(const Tensor& dy, const Tensor& x, const Tensor& mu, const Tensor& sg,
                     const Tensor& gamma, Tensor& dgamma, Tensor& dbeta) {
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor dx(x.shape);
    for (int r = 0; r < rows; ++r) {
        float m1 = 0.0f, m2 = 0.0f;
        const float s = sg.data[r], mu_r = mu.data[r];
        for (int j = 0; j < cols; ++j) {
            float xhat = (x.at(r, j) - mu_r) / s;
            float dyh = dy.at(r, j) * gamma.data[j];
            m1 += dyh;
            m2 += dyh * xhat;
            dgamma.data[j] += dy.at(r, j) * xhat;
            dbeta.data[j] += dy.at(r, j);
        }
        m1 /= static_cast<float>(cols);
        m2 /= static_cast<float>(cols);
        for (int j = 0; j < cols; ++j) {
            float xhat = (x.at(r, j) - mu_r) / s;
            float dyh = dy.at(r, j) * gamma.data[j];
            dx.at(r, j) = (dyh - m1 - xhat * m2) / s;
        }
    }
    return dx;
}

/// dX for y = x W + b; accumulates dW, db.
Tensor affine_bwd(const Tensor& dy, const Tensor& x, const Tensor& w, Tensor& dw, Tensor& db) {
    const int rows = x.dim(0), in = x.dim(1), out = w.dim(1);
    for (int r = 0; r < rows; ++r) {
        const float* dyr = dy.data.data() + static_cast<size_t>(r) * out;
        const float* xr = x.data.data() + static_cast<size_t>(r) * in;
        for (int j = 0; j < out; ++j) db.data[static_cast<size_t>(j)] += dyr[j];
        for (int k = 0; k < in; ++k) {
            float* dwr = dw.data.data() + static_cast<size_t>(k) * out;
            const float xv = xr[k];
            for (int j = 0; j < out; ++j) dwr[j] += xv * dyr[j];
        }
    }
    Tensor dx({rows, in});
    for (int r = 0; r < rows; ++r) {
        const float* dyr = dy.data.data() + static_cast<size_t>(r) * out;
        float* dxr = dx.data.data() + static_cast<size_t>(r) * in;
        for (int k = 0; k < in; ++k) {
            const float* wr = w.data.data() + static_cast<size_t>(k) * out;
            float acc = 0.0f;
            for (int j = 0; j < out; ++j) acc += dyr[j] * wr[j];
            dxr[k] = acc;
        }
    }
    return dx;
}

/// Cross-entropy loss + full backward pass; gradients accumulate into `gr`.
float vanilla_backward(const ToyModel& m, const Tensor& patches_image, const ForwardCache& fc, int label,
                       Grads& gr) {
    const int T = fc.x0.dim(0), d = fc.x0.dim(1);
    const int H = m.cfg.heads, dh = d / H;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const int C = m.cfg.n_classes;

    // softmax cross-entropy
    Tensor probs = fc.logits;
    float mx = *std::max_element(probs.data.begin(), probs.data.end());
    float denom = 0.0f;
    for (float& v : probs.data) {
        v = std::exp(v - mx);
        denom += v;
    }
    for (float& v : probs.data) v /= denom;
    float loss = -std::log(std::max(probs.data[static_cast<size_t>(label)], 1e-12f));

    Tensor dlogits = probs;
    dlogits.data[static_cast<size_t>(label)] -= 1.0f;

    Tensor dz({d});
    for (int j = 0; j < d; ++j) {
        float acc = 0.0f;
        for (int c = 0; c < C; ++c) acc += dlogits.data[static_cast<size_t>(c)] * m.head_w.at(j, c);
        dz.data[j] = acc;
    }
    for (int c = 0; c < C; ++c) {
        gr.g.head_b.data[static_cast<size_t>(c)] += dlogits.data[static_cast<size_t>(c)];
        for (int j = 0; j < d; ++j) gr.g.head_w.at(j, c) += fc.z.data[j] * dlogits.data[static_cast<size_t>(c)];
    }

    Tensor dhf({T, d});
    if (m.cfg.has_cls()) {
        for (int j = 0; j < d; ++j) dhf.at(0, j) = dz.data[j];
    } else {
        const float inv = 1.0f / static_cast<float>(T);
        for (int r = 0; r < T; ++r)
            for (int j = 0; j < d; ++j) dhf.at(r, j) = dz.data[j] * inv;
    }
    const Tensor& x_last = fc.blocks.back().x_out;
    Tensor dx = layernorm_bwd(dhf, x_last, fc.muf, fc.sgf, m.lnf_g, gr.g.lnf_g, gr.g.lnf_b);

    for (int l = static_cast<int>(m.blocks.size()) - 1; l >= 0; --l) {
        const BlockParams& bp = m.blocks[static_cast<size_t>(l)];
        const BlockCache& bc = fc.blocks[static_cast<size_t>(l)];
        BlockParams& gb = gr.g.blocks[static_cast<size_t>(l)];

        // MLP branch
        Tensor dmlp = dx; // dy of mlp_out
        Tensor dg = affine_bwd(dmlp, bc.g, bp.w2, gb.w2, gb.b2);
        for (int i = 0; i < dg.dim(0); ++i)
            for (int j = 0; j < dg.dim(1); ++j) dg.at(i, j) *= gelu_grad(bc.u.at(i, j));
        Tensor dh2 = affine_bwd(dg, bc.h2, bp.w1, gb.w1, gb.b1);
        Tensor dx_mid = layernorm_bwd(dh2, bc.x_mid, bc.mu2, bc.sg2, bp.ln2_g, gb.ln2_g, gb.ln2_b);
        add_into(dx_mid, dx); // residual

        // attention branch
        Tensor dattn_out = dx_mid;
        Tensor dcat = affine_bwd(dattn_out, bc.cat, bp.wo, gb.wo, gb.bo);
        Tensor dq({T, d}), dk({T, d}), dv({T, d});
        for (int hd = 0; hd < H; ++hd) {
            const int off = hd * dh;
            const Tensor& A = bc.attn[static_cast<size_t>(hd)];
            // dA = do . v^T ; dv = A^T . do
            Tensor dA({T, T});
            for (int i = 0; i < T; ++i)
                for (int t = 0; t < T; ++t) {
                    float acc = 0.0f;
                    for (int j = 0; j < dh; ++j) acc += dcat.at(i, off + j) * bc.v.at(t, off + j);
                    dA.at(i, t) = acc;
                }
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < dh; ++j) {
                    float acc = 0.0f;
                    for (int i = 0; i < T; ++i) acc += A.at(i, t) * dcat.at(i, off + j);
                    dv.at(t, off + j) = acc;
                }
            // softmax backward, then the 1/sqrt(dh) score scale
            Tensor ds({T, T});
            for (int i = 0; i < T; ++i) {
                float row = 0.0f;
                for (int t = 0; t < T; ++t) row += dA.at(i, t) * A.at(i, t);
                for (int t = 0; t < T; ++t) ds.at(i, t) = A.at(i, t) * (dA.at(i, t) - row) * scale;
            }
            for (int i = 0; i < T; ++i)
                for (int j = 0; j < dh; ++j) {
                    float accq = 0.0f, acck = 0.0f;
                    for (int t = 0; t < T; ++t) {
                        accq += ds.at(i, t) * bc.k.at(t, off + j);
                        acck += ds.at(t, i) * bc.q.at(t, off + j);
                    }
                    dq.at(i, off + j) = accq;
                    dk.at(i, off + j) = acck;
                }
        }
        Tensor dh1 = affine_bwd(dq, bc.h1, bp.wq, gb.wq, gb.bq);
        add_into(dh1, affine_bwd(dk, bc.h1, bp.wk, gb.wk, gb.bk));
        add_into(dh1, affine_bwd(dv, bc.h1, bp.wv, gb.wv, gb.bv));
        Tensor dx_in = layernorm_bwd(dh1, bc.x_in, bc.mu1, bc.sg1, bp.ln1_g, gb.ln1_g, gb.ln1_b);
        add_into(dx_in, dx_mid); // residual
        dx = dx_in;
    }

    // embedding
    add_into(gr.g.pos, dx);
    int row0 = 0;
    if (m.cfg.has_cls()) {
        for (int j = 0; j < d; ++j) gr.g.cls.at(0, j) += dx.at(0, j);
        row0 = 1;
    }
    const int npatch = T - row0;
    Tensor demb({npatch, d});
    for (int r = 0; r < npatch; ++r)
        for (int j = 0; j < d; ++j) demb.at(r, j) = dx.at(row0 + r, j);
    affine_bwd(demb, patches_image, m.patch_w, gr.g.patch_w, gr.g.patch_b);
    return loss;
}

struct Adam {
    std::vector<Tensor> m, v;
    int step = 0;
    float lr, b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;

    void init(ToyModel& model, float lr_) {
        lr = lr_;
        visit_params(model, [&](Tensor& t) {
            m.push_back(Tensor(t.shape));
            v.push_back(Tensor(t.shape));
        });
    }
    void update(ToyModel& model, Grads& grads) {
        ++step;
        const float bc1 = 1.0f - std::pow(b1, static_cast<float>(step));
        const float bc2 = 1.0f - std::pow(b2, static_cast<float>(step));
        size_t idx = 0;
        std::vector<Tensor*> params, gs;
        visit_params(model, [&](Tensor& t) { params.push_back(&t); });
        grads.visit([&](Tensor& t) { gs.push_back(&t); });
        for (; idx < params.size(); ++idx) {
            Tensor& p = *params[idx];
            Tensor& g = *gs[idx];
            Tensor& mi = m[idx];
            Tensor& vi = v[idx];
            for (size_t i = 0; i < p.data.size(); ++i) {
                float gv = g.data[i];
                mi.data[i] = b1 * mi.data[i] + (1.0f - b1) * gv;
                vi.data[i] = b2 * vi.data[i] + (1.0f - b2) * gv * gv;
                float mhat = mi.data[i] / bc1;
                float vhat = vi.data[i] / bc2;
                p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

} // namespace

TrainTarget train_target_from_string(const std::string& s) {
    if (s == "foreground" || s == "fg") return TrainTarget::Foreground;
    if (s == "background" || s == "bg") return TrainTarget::Background;
    if (s == "group" || s == "joint") return TrainTarget::Group;
    throw std::invalid_argument("unknown train target: " + s);
}

const char* to_string(TrainTarget t) {
    switch (t) {
        case TrainTarget::Foreground: return "foreground";
        case TrainTarget::Background: return "background";
        case TrainTarget::Group: return "group";
    }
    return "?";
}

int target_label(const SyntheticDataset& ds, int image, TrainTarget t) {
    switch (t) {
        case TrainTarget::Foreground: return ds.labels[image];
        case TrainTarget::Background: return ds.groups[image];
        case TrainTarget::Group: return ds.group_cell(image);
    }
    return 0;
}

int target_classes(const SyntheticDataset& ds, TrainTarget t) {
    switch (t) {
        case TrainTarget::Foreground: return ds.spec.n_fg;
        case TrainTarget::Background: return ds.spec.n_bg;
        case TrainTarget::Group: return ds.spec.n_fg * ds.spec.n_bg;
    }
    return 0;
}

Tensor represent(const ToyModel& m, const Tensor& image) {
    if (trainable(m.cfg)) {
        ForwardCache fc;
        vanilla_forward(m, embed_image(m, image), fc);
        return fc.z;
    }
    return forward_record(m, image).z;
}

std::vector<Tensor> represent_batch(const ToyModel& m, const SyntheticDataset& ds,
                                    const std::vector<int>& indices) {
    std::vector<Tensor> out(indices.size());
    parallel_for(static_cast<int>(indices.size()),
                 [&](int i) { out[static_cast<size_t>(i)] = represent(m, ds.images[static_cast<size_t>(indices[static_cast<size_t>(i)])]); });
    return out;
}

float evaluate(const ToyModel& m, const SyntheticDataset& ds, const std::vector<int>& indices,
               TrainTarget target) {
    std::vector<int> correct(indices.size(), 0);
    parallel_for(static_cast<int>(indices.size()), [&](int i) {
        int img = indices[static_cast<size_t>(i)];
        Tensor z = represent(m, ds.images[static_cast<size_t>(img)]);
        correct[static_cast<size_t>(i)] = predict_from(m, z) == target_label(ds, img, target) ? 1 : 0;
    });
    int sum = std::accumulate(correct.begin(), correct.end(), 0);
    return indices.empty() ? 0.0f : static_cast<float>(sum) / static_cast<float>(indices.size());
}

TrainResult train_toy(ToyModel& model, const SyntheticDataset& ds, const TrainConfig& cfg) {
    if (!trainable(model.cfg))
        throw std::invalid_argument("train_toy: only the vanilla variants support training, got " +
                                    std::string(to_string(model.cfg.variant)));
    if (ds.train_idx.empty() || ds.val_idx.empty())
        throw std::invalid_argument("train_toy: dataset needs train and val splits");
    if (model.cfg.n_classes != target_classes(ds, cfg.target))
        throw std::invalid_argument("train_toy: head width does not match target classes");

    Rng rng(Rng::mix(cfg.seed, 0x7e41));
    Adam adam;
    adam.init(model, cfg.lr);
    std::vector<int> order = ds.train_idx;

    // Patch rows per image, cached once (embedding backward needs them).
    std::vector<Tensor> patches(ds.images.size());
    parallel_for(static_cast<int>(ds.images.size()),
                 [&](int i) { patches[static_cast<size_t>(i)] = patchify(ds.images[static_cast<size_t>(i)], model.cfg.patch_grid); });

    TrainResult result;
    // fixed worker count: the gradient merge order (and so the whole
    // training trajectory) must not depend on the machine
    const int nthreads = 4;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double epoch_loss = 0.0;
        int seen = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            const int bsz = static_cast<int>(end - start);
            std::vector<Grads> partial;
            partial.reserve(nthreads);
            for (int w = 0; w < nthreads; ++w) partial.emplace_back(model);
            std::vector<double> losses(static_cast<size_t>(nthreads), 0.0);
            parallel_for(nthreads, [&](int w) {
                for (size_t i = start + static_cast<size_t>(w); i < end; i += nthreads) {
                    int img = order[i];
                    ForwardCache fc;
                    vanilla_forward(model, embed_image(model, ds.images[static_cast<size_t>(img)]), fc);
                    losses[static_cast<size_t>(w)] += vanilla_backward(
                        model, patches[static_cast<size_t>(img)], fc, target_label(ds, img, cfg.target),
                        partial[static_cast<size_t>(w)]);
                }
            });
            // deterministic merge, worker order then batch scaling
            Grads total(model);
            std::vector<Tensor*> acc;
            total.visit([&](Tensor& t) { acc.push_back(&t); });
            for (int w = 0; w < nthreads; ++w) {
                std::vector<Tensor*> part;
                partial[static_cast<size_t>(w)].visit([&](Tensor& t) { part.push_back(&t); });
                for (size_t k = 0; k < acc.size(); ++k) add_into(*acc[k], *part[k]);
            }
            const float inv = 1.0f / static_cast<float>(bsz);
            total.visit([&](Tensor& t) {
                for (float& v : t.data) v *= inv;
            });
            double batch_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / bsz;
            if (!std::isfinite(batch_loss))
                throw NumericError("train_toy: loss diverged (non-finite) at epoch " +
                                         std::to_string(epoch) + ", batch " + std::to_string(start / cfg.batch));
            epoch_loss += batch_loss * bsz;
            seen += bsz;
            adam.update(model, total);
        }
        result.loss_curve.push_back(static_cast<float>(epoch_loss / std::max(1, seen)));
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d loss %.4f\n", epoch, result.loss_curve.back());
        // cheap early exit once the fit is clearly past the targets
        if (result.loss_curve.back() < 0.02f && epoch + 1 >= std::min(8, cfg.epochs)) break;
    }
    result.train_accuracy = evaluate(model, ds, ds.train_idx, cfg.target);
    result.val_accuracy = evaluate(model, ds, ds.val_idx, cfg.target);
    return result;
}

int LinearProbe::predict(const Tensor& z) const {
    Tensor z2 = z;
    z2.shape = {1, z.dim(0)};
    Tensor logits = affine(z2, w, b);
    return static_cast<int>(std::max_element(logits.data.begin(), logits.data.end()) - logits.data.begin());
}

LinearProbe train_linear_probe(const std::vector<Tensor>& reps, const std::vector<int>& labels,
                               int classes, int epochs, float lr, uint64_t seed) {
    if (reps.empty() || reps.size() != labels.size())
        throw std::invalid_argument("train_linear_probe: bad inputs");
    const int d = reps[0].dim(0);
    LinearProbe probe;
    probe.w = Tensor({d, classes});
    probe.b = Tensor({classes});
    Rng rng(Rng::mix(seed, 0x9a0be));
    for (float& v : probe.w.data) v = rng.gaussian(0.0f, 0.01f);

    std::vector<Tensor> mw{Tensor({d, classes}), Tensor({classes})};
    std::vector<Tensor> vw{Tensor({d, classes}), Tensor({classes})};
    std::vector<int> order(reps.size());
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    const int batch = 64;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (size_t start = 0; start < order.size(); start += batch) {
            size_t end = std::min(order.size(), start + batch);
            Tensor gw({d, classes}), gb({classes});
            for (size_t i = start; i < end; ++i) {
                const Tensor& z = reps[static_cast<size_t>(order[i])];
                Tensor z2 = z;
                z2.shape = {1, d};
                Tensor logits = affine(z2, probe.w, probe.b);
                float mx = *std::max_element(logits.data.begin(), logits.data.end());
                float denom = 0.0f;
                for (float& v : logits.data) {
                    v = std::exp(v - mx);
                    denom += v;
                }
                for (float& v : logits.data) v /= denom;
                logits.data[static_cast<size_t>(labels[static_cast<size_t>(order[i])])] -= 1.0f;
                for (int c = 0; c < classes; ++c) {
                    gb.data[static_cast<size_t>(c)] += logits.data[static_cast<size_t>(c)];
                    for (int j = 0; j < d; ++j) gw.at(j, c) += z.data[j] * logits.data[static_cast<size_t>(c)];
                }
            }
            const float inv = 1.0f / static_cast<float>(end - start);
            for (float& v : gw.data) v *= inv;
            for (float& v : gb.data) v *= inv;
            ++step;
            const float bc1 = 1.0f - std::pow(0.9f, static_cast<float>(step));
            const float bc2 = 1.0f - std::pow(0.999f, static_cast<float>(step));
            Tensor* params[2] = {&probe.w, &probe.b};
            Tensor* grads[2] = {&gw, &gb};
            for (int k = 0; k < 2; ++k)
                for (size_t i = 0; i < params[k]->data.size(); ++i) {
                    float gv = grads[k]->data[i];
                    mw[static_cast<size_t>(k)].data[i] = 0.9f * mw[static_cast<size_t>(k)].data[i] + 0.1f * gv;
                    vw[static_cast<size_t>(k)].data[i] =
                        0.999f * vw[static_cast<size_t>(k)].data[i] + 0.001f * gv * gv;
                    params[k]->data[i] -= lr * (mw[static_cast<size_t>(k)].data[i] / bc1) /
                                          (std::sqrt(vw[static_cast<size_t>(k)].data[i] / bc2) + 1e-8f);
                }
        }
    }
    return probe;
}

float probe_accuracy(const LinearProbe& probe, const std::vector<Tensor>& reps,
                     const std::vector<int>& labels) {
    int correct = 0;
    for (size_t i = 0; i < reps.size(); ++i)
        if (probe.predict(reps[i]) == labels[i]) ++correct;
    return reps.empty() ? 0.0f : static_cast<float>(correct) / static_cast<float>(reps.size());
}

PrototypeTable compute_prototypes(const ToyModel& model, const SyntheticDataset& ds,
                                  const std::vector<int>& indices) {
    PrototypeTable table;
    std::vector<Tensor> reps = represent_batch(model, ds, indices);
    const int d = reps.empty() ? model.cfg.final_dim() : reps[0].dim(0);

    auto add_group = [&](const std::string& feature, int count, auto&& label_of, const char* prefix) {
        for (int c = 0; c < count; ++c) {
            Tensor mean({d});
            int n = 0;
            for (size_t i = 0; i < reps.size(); ++i) {
                if (label_of(indices[i]) != c) continue;
                add_into(mean, reps[i]);
                ++n;
            }
            if (n == 0) throw std::runtime_error("compute_prototypes: empty class " + std::to_string(c));
            for (float& v : mean.data) v /= static_cast<float>(n);
            double norm = l2_norm(mean);
            if (norm < 1e-12) throw std::runtime_error("compute_prototypes: degenerate prototype");
            for (float& v : mean.data) v = static_cast<float>(v / norm);
            table.names.push_back(prefix + std::to_string(c));
            table.features.push_back(feature);
            table.rows.push_back(std::move(mean));
        }
    };
    add_group("foreground", ds.spec.n_fg, [&](int i) { return ds.labels[static_cast<size_t>(i)]; }, "fg");
    add_group("background", ds.spec.n_bg, [&](int i) { return ds.groups[static_cast<size_t>(i)]; }, "bg");
    return table;
}

} // namespace vitdec
