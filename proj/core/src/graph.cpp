#include "vitdec/graph.hpp"

#include "vitdec/linalg.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace vitdec {

const char* to_string(NodeKind k) {
    switch (k) {
        case NodeKind::LinearUnary: return "linear-unary";
        case NodeKind::LinearReduction: return "linear-reduction";
        case NodeKind::LinearBinary: return "linear-binary";
        case NodeKind::Nonlinear: return "nonlinear";
        case NodeKind::Leaf: return "leaf";
        case NodeKind::Detach: return "detach";
    }
    return "?";
}

const char* to_string(OpType op) {
    switch (op) {
        case OpType::Leaf: return "leaf";
        case OpType::Detach: return "detach";
        case OpType::Add: return "add";
        case OpType::Scale: return "scale";
        case OpType::Affine: return "affine";
        case OpType::Transpose: return "transpose";
        case OpType::SliceCols: return "slice_cols";
        case OpType::SelectRows: return "select_rows";
        case OpType::TakeRow: return "take_row";
        case OpType::MeanRows: return "mean_rows";
        case OpType::ConcatCols: return "concat_cols";
        case OpType::ConcatRows: return "concat_rows";
        case OpType::Matmul: return "matmul";
        case OpType::LayerNorm: return "layernorm";
        case OpType::Softmax: return "softmax";
        case OpType::Gelu: return "gelu";
        case OpType::TokenConv: return "token_conv";
    }
    return "?";
}

Tensor FrozenLayerNorm::push_share(const Tensor& c, double share) const {
    if (!(share > 0.0) || share > 1.0) throw std::invalid_argument("layernorm push: share outside (0,1]");
    const int rows = c.rows();
    const int cols = c.cols();
    if (rows != static_cast<int>(mu.data.size()))
        throw std::invalid_argument("layernorm push: contribution rows " + std::to_string(rows) +
                                    " do not match frozen statistics " + std::to_string(mu.data.size()));
    Tensor out(c.shape);
    const float frac = static_cast<float>(share);
    for (int r = 0; r < rows; ++r) {
        const float m = mu.data[r] * frac;
        const float s = sigma.data[r];
        for (int j = 0; j < cols; ++j) {
            float v = (c.data[static_cast<size_t>(r) * cols + j] - m) / s;
            out.data[static_cast<size_t>(r) * cols + j] = gamma.data[j] * v + beta.data[j] * frac;
        }
    }
    return out;
}

namespace {

[[noreturn]] void shape_error(OpType op, const std::string& detail) {
    throw std::invalid_argument(std::string("record(") + to_string(op) + "): " + detail);
}

void require_rank2(OpType op, const Tensor& t, const char* name) {
    if (t.ndim() != 2) shape_error(op, std::string(name) + " must be rank-2, got " + t.shape_str());
}

Tensor compute_affine(OpMeta& meta, const Tensor& x) {
    require_rank2(OpType::Affine, meta.weight, "weight");
    const int in = meta.weight.dim(0);
    const int out = meta.weight.dim(1);
    const bool vec = x.ndim() == 1;
    const int cols = vec ? x.dim(0) : x.dim(1);
    if (cols != in)
        shape_error(OpType::Affine, "input " + x.shape_str() + " incompatible with weight " + meta.weight.shape_str());
    if (!meta.bias.data.empty() && static_cast<int>(meta.bias.data.size()) != out)
        shape_error(OpType::Affine, "bias " + meta.bias.shape_str() + " incompatible with weight " + meta.weight.shape_str());
    Tensor x2 = x;
    if (vec) x2.shape = {1, cols};
    Tensor y = affine(x2, meta.weight, meta.bias);
    if (vec) y.shape = {out};
    y.node = kNoNode;
    return y;
}

Tensor compute_matmul(const Tensor& a, const Tensor& b) {
    require_rank2(OpType::Matmul, a, "left");
    require_rank2(OpType::Matmul, b, "right");
    if (a.dim(1) != b.dim(0))
        shape_error(OpType::Matmul, "left " + a.shape_str() + " incompatible with right " + b.shape_str());
    Tensor y = matmul(a, b);
    y.node = kNoNode;
    return y;
}

Tensor compute_layernorm(OpMeta& meta, const Tensor& x) {
    require_rank2(OpType::LayerNorm, x, "input");
    const int rows = x.dim(0), cols = x.dim(1);
    if (static_cast<int>(meta.ln.gamma.data.size()) != cols || static_cast<int>(meta.ln.beta.data.size()) != cols)
        shape_error(OpType::LayerNorm, "gamma/beta width does not match input " + x.shape_str());
    (void)rows;
    // epsilon lives under the square root (sigma = sqrt(var + eps))
    Tensor y = layernorm_fwd(x, meta.ln.gamma, meta.ln.beta, meta.ln.eps, &meta.ln.mu, &meta.ln.sigma);
    y.node = kNoNode;
    return y;
}

Tensor compute_softmax(const Tensor& x) {
    require_rank2(OpType::Softmax, x, "input");
    Tensor y = x;
    y.node = kNoNode;
    softmax_rows_inplace(y);
    return y;
}

// Toy stand-in for an MBConv block: 3x3 neighborhood average over the token
// grid, pointwise expand + GELU + project. Classified nonlinear and never
// decomposed.
Tensor compute_token_conv(OpMeta& meta, const Tensor& x) {
    require_rank2(OpType::TokenConv, x, "input");
    const int g = meta.grid;
    const int d = x.dim(1);
    if (g * g != x.dim(0))
        shape_error(OpType::TokenConv, "grid " + std::to_string(g) + " does not cover " + x.shape_str());
    Tensor mixed(x.shape);
    for (int ry = 0; ry < g; ++ry)
        for (int rx = 0; rx < g; ++rx) {
            for (int j = 0; j < d; ++j) {
                float acc = 0.0f;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = ry + dy, xx = rx + dx;
                        if (yy < 0 || yy >= g || xx < 0 || xx >= g) continue;
                        acc += x.at(yy * g + xx, j);
                    }
                mixed.at(ry * g + rx, j) = acc / 9.0f;
            }
        }
    OpMeta m1;
    m1.weight = meta.conv_w1;
    m1.bias = meta.conv_b1;
    Tensor h = compute_affine(m1, mixed);
    for (float& v : h.data) v = gelu_value(v);
    OpMeta m2;
    m2.weight = meta.conv_w2;
    m2.bias = meta.conv_b2;
    return compute_affine(m2, h);
}

} // namespace

Tensor Tape::compute(OpType op, OpMeta& meta, const std::vector<const Tensor*>& in) {
    auto arity = [&](size_t n) {
        if (in.size() != n)
            shape_error(op, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    };
    switch (op) {
        case OpType::Leaf:
        case OpType::Detach: {
            arity(1);
            Tensor t = *in[0];
            t.node = kNoNode;
            return t;
        }
        case OpType::Add: {
            arity(2);
            if (!in[0]->same_shape(*in[1]))
                shape_error(op, "operands " + in[0]->shape_str() + " vs " + in[1]->shape_str());
            Tensor y(in[0]->shape);
            for (size_t i = 0; i < y.data.size(); ++i)
                y.data[i] = meta.alpha * in[0]->data[i] + meta.beta * in[1]->data[i];
            return y;
        }
        case OpType::Scale: {
            arity(1);
            Tensor y = *in[0];
            y.node = kNoNode;
            for (float& v : y.data) v *= meta.alpha;
            return y;
        }
        case OpType::Affine:
            arity(1);
            return compute_affine(meta, *in[0]);
        case OpType::Transpose: {
            arity(1);
            require_rank2(op, *in[0], "input");
            Tensor y = transpose(*in[0]);
            y.node = kNoNode;
            return y;
        }
        case OpType::SliceCols: {
            arity(1);
            const Tensor& x = *in[0];
            require_rank2(op, x, "input");
            if (meta.col_begin < 0 || meta.col_end > x.dim(1) || meta.col_begin >= meta.col_end)
                shape_error(op, "range [" + std::to_string(meta.col_begin) + "," + std::to_string(meta.col_end) +
                                    ") invalid for " + x.shape_str());
            Tensor y({x.dim(0), meta.col_end - meta.col_begin});
            for (int r = 0; r < x.dim(0); ++r)
                for (int j = meta.col_begin; j < meta.col_end; ++j)
                    y.at(r, j - meta.col_begin) = x.at(r, j);
            return y;
        }
        case OpType::SelectRows: {
            arity(1);
            const Tensor& x = *in[0];
            require_rank2(op, x, "input");
            Tensor y({static_cast<int>(meta.rows.size()), x.dim(1)});
            for (size_t i = 0; i < meta.rows.size(); ++i) {
                int r = meta.rows[i];
                if (r < 0 || r >= x.dim(0)) shape_error(op, "row " + std::to_string(r) + " out of " + x.shape_str());
                for (int j = 0; j < x.dim(1); ++j) y.at(static_cast<int>(i), j) = x.at(r, j);
            }
            return y;
        }
        case OpType::TakeRow: {
            arity(1);
            const Tensor& x = *in[0];
            require_rank2(op, x, "input");
            if (meta.row < 0 || meta.row >= x.dim(0))
                shape_error(op, "row " + std::to_string(meta.row) + " out of " + x.shape_str());
            Tensor y({x.dim(1)});
            for (int j = 0; j < x.dim(1); ++j) y.data[j] = x.at(meta.row, j);
            return y;
        }
        case OpType::MeanRows: {
            arity(1);
            const Tensor& x = *in[0];
            require_rank2(op, x, "input");
            meta.axis = 0;
            Tensor y({x.dim(1)});
            const float inv = 1.0f / static_cast<float>(x.dim(0));
            for (int j = 0; j < x.dim(1); ++j) {
                float acc = 0.0f;
                for (int r = 0; r < x.dim(0); ++r) acc += x.at(r, j);
                y.data[j] = acc * inv;
            }
            return y;
        }
        case OpType::ConcatCols: {
            if (in.empty()) shape_error(op, "no inputs");
            int rows = in[0]->dim(0), total = 0;
            meta.offsets.clear();
            for (const Tensor* t : in) {
                require_rank2(op, *t, "input");
                if (t->dim(0) != rows) shape_error(op, "row mismatch " + t->shape_str());
                meta.offsets.push_back(total);
                total += t->dim(1);
            }
            Tensor y({rows, total});
            for (size_t s = 0; s < in.size(); ++s)
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < in[s]->dim(1); ++j)
                        y.at(r, meta.offsets[s] + j) = in[s]->at(r, j);
            return y;
        }
        case OpType::ConcatRows: {
            if (in.empty()) shape_error(op, "no inputs");
            int cols = in[0]->dim(1), total = 0;
            meta.offsets.clear();
            for (const Tensor* t : in) {
                require_rank2(op, *t, "input");
                if (t->dim(1) != cols) shape_error(op, "column mismatch " + t->shape_str());
                meta.offsets.push_back(total);
                total += t->dim(0);
            }
            Tensor y({total, cols});
            for (size_t s = 0; s < in.size(); ++s)
                for (int r = 0; r < in[s]->dim(0); ++r)
                    for (int j = 0; j < cols; ++j) y.at(meta.offsets[s] + r, j) = in[s]->at(r, j);
            return y;
        }
        case OpType::Matmul: {
            arity(2);
            meta.axis = 1; // contraction axis of the left operand
            return compute_matmul(*in[0], *in[1]);
        }
        case OpType::LayerNorm:
            arity(1);
            return compute_layernorm(meta, *in[0]);
        case OpType::Softmax:
            arity(1);
            return compute_softmax(*in[0]);
        case OpType::Gelu: {
            arity(1);
            Tensor y = *in[0];
            y.node = kNoNode;
            for (float& v : y.data) v = gelu_value(v);
            return y;
        }
        case OpType::TokenConv:
            arity(1);
            return compute_token_conv(meta, *in[0]);
    }
    shape_error(op, "unhandled op");
}

namespace {

NodeKind classify_op(OpType op, const std::vector<GraphNode>& nodes, const std::vector<NodeId>& parents) {
    switch (op) {
        case OpType::Leaf: return NodeKind::Leaf;
        case OpType::Detach: return NodeKind::Detach;
        case OpType::Add: return NodeKind::LinearBinary;
        case OpType::Scale:
        case OpType::Affine:
        case OpType::Transpose:
        case OpType::SliceCols:
        case OpType::SelectRows:
        case OpType::TakeRow:
        case OpType::LayerNorm: return NodeKind::LinearUnary;
        case OpType::MeanRows:
        case OpType::ConcatCols:
        case OpType::ConcatRows: return NodeKind::LinearReduction;
        case OpType::Matmul: {
            // Linear in the right operand only when the left one is a
            // constant for traversal purposes (a detached snapshot or a
            // leaf); otherwise the product is bilinear and opaque.
            NodeKind lk = nodes[static_cast<size_t>(parents.at(0))].kind;
            return (lk == NodeKind::Detach || lk == NodeKind::Leaf) ? NodeKind::LinearReduction
                                                                    : NodeKind::Nonlinear;
        }
        case OpType::Softmax:
        case OpType::Gelu:
        case OpType::TokenConv: return NodeKind::Nonlinear;
    }
    return NodeKind::Nonlinear;
}

} // namespace

Tensor Tape::record(OpType op, OpMeta meta, const std::vector<Tensor>& inputs) {
    if (sealed_) throw std::runtime_error("record: tape is sealed, recording inactive");
    std::vector<NodeId> parents;
    std::vector<const Tensor*> ptrs;
    parents.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        if (op != OpType::Leaf) {
            if (t.node == kNoNode)
                throw std::invalid_argument(std::string("record(") + to_string(op) +
                                            "): input tensor is not on the tape");
            if (t.node < 0 || static_cast<size_t>(t.node) >= nodes_.size())
                throw std::invalid_argument("record: input node id out of range");
            parents.push_back(t.node);
        }
        ptrs.push_back(&t);
    }
    Tensor out = compute(op, meta, ptrs);
    GraphNode n;
    n.id = static_cast<NodeId>(nodes_.size());
    n.op = op;
    n.parents = std::move(parents);
    n.meta = std::move(meta);
    n.kind = classify_op(op, nodes_, n.parents);
    n.out_shape = out.shape;
    out.node = n.id;
    nodes_.push_back(std::move(n));
    values_.push_back(out);
    return out;
}

Tensor Tape::leaf(const Tensor& t) { return record(OpType::Leaf, {}, {t}); }

Tensor Tape::detach(const Tensor& t) {
    if (t.node == kNoNode) throw std::invalid_argument("detach: tensor has no node");
    return record(OpType::Detach, {}, {t});
}

NodeKind Tape::classify(NodeId id) const { return node(id).kind; }

const GraphNode& Tape::node(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
        throw std::out_of_range("tape: unknown node id " + std::to_string(id));
    return nodes_[static_cast<size_t>(id)];
}

GraphNode& Tape::node_mut(NodeId id) {
    if (sealed_) throw std::runtime_error("tape: sealed, nodes are immutable");
    return const_cast<GraphNode&>(node(id));
}

const Tensor& Tape::value(NodeId id) const {
    node(id); // bounds check
    return values_[static_cast<size_t>(id)];
}

void Tape::set_output(NodeId id) {
    node(id);
    outputs_.push_back(id);
}

std::string Tape::dump() const {
    std::ostringstream out;
    for (const GraphNode& n : nodes_) {
        out << "node " << n.id << " " << to_string(n.kind) << " parents=";
        for (size_t i = 0; i < n.parents.size(); ++i) {
            if (i) out << ",";
            out << n.parents[i];
        }
        if (n.parents.empty()) out << "-";
        out << " shape=";
        for (size_t i = 0; i < n.out_shape.size(); ++i) {
            if (i) out << "x";
            out << n.out_shape[i];
        }
        out << "\n";
    }
    return out.str();
}

bool Tape::replay_matches() const {
    std::vector<Tensor> re(values_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) {
        const GraphNode& n = nodes_[i];
        if (n.op == OpType::Leaf) {
            re[i] = values_[i];
            continue;
        }
        std::vector<const Tensor*> in;
        in.reserve(n.parents.size());
        for (NodeId p : n.parents) in.push_back(&re[static_cast<size_t>(p)]);
        OpMeta meta = n.meta;
        re[i] = compute(n.op, meta, in);
        if (re[i].data.size() != values_[i].data.size()) return false;
        if (std::memcmp(re[i].data.data(), values_[i].data.data(), re[i].data.size() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

FrozenLayerNorm freeze_layernorm(const Tape& tape, NodeId id) {
    const GraphNode& n = tape.node(id);
    if (n.op != OpType::LayerNorm)
        throw std::invalid_argument("freeze_layernorm: node " + std::to_string(id) + " is not a layernorm");
    if (!n.meta.ln.valid())
        throw std::invalid_argument("freeze_layernorm: forward statistics absent for node " + std::to_string(id));
    return n.meta.ln;
}

} // namespace vitdec
