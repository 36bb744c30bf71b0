#pragma once

#include "vitdec/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vitdec {

/// Linearity class of a recorded node. The decomposition pass distributes
/// over the three linear kinds and stops at everything else.
enum class NodeKind {
    LinearUnary,
    LinearReduction,
    LinearBinary,
    Nonlinear,
    Leaf,
    Detach,
};

const char* to_string(NodeKind k);

enum class OpType {
    Leaf,
    Detach,
    Add,        // alpha*x + beta*y
    Scale,      // alpha*x
    Affine,     // x W + b
    Transpose,
    SliceCols,  // x[:, c0:c1)
    SelectRows, // x[rows, :]
    TakeRow,    // x[row, :] -> 1-D
    MeanRows,   // column means -> 1-D
    ConcatCols, // n-ary, column blocks
    ConcatRows, // n-ary, row blocks
    Matmul,     // left * right
    LayerNorm,  // row-wise, statistics frozen at record time
    Softmax,    // row-wise
    Gelu,
    TokenConv,  // opaque token-mixing conv block
};

const char* to_string(OpType op);

/// Per-position LayerNorm statistics captured during the forward pass,
/// plus the affine parameters. `mu` and `sigma` have one entry per row
/// (sigma includes the epsilon under the square root).
struct FrozenLayerNorm {
    Tensor mu;    // (rows)
    Tensor sigma; // (rows)
    Tensor gamma; // (cols)
    Tensor beta;  // (cols)
    float eps = 1e-5f;

    bool valid() const { return !mu.data.empty() && !sigma.data.empty(); }

    /// Push one of n contributions through the linearized map:
    /// gamma * (c - mu/n) / sigma + beta/n. Summing over all n
    /// contributions reproduces the recorded LayerNorm output exactly.
    Tensor push(const Tensor& c, int n) const { return push_share(c, 1.0 / n); }

    /// General form: the contribution absorbs `share` of mu and beta
    /// (shares over a list must sum to 1 to keep the identity exact).
    Tensor push_share(const Tensor& c, double share) const;
};

struct OpMeta {
    Tensor weight; // Affine
    Tensor bias;   // Affine (may be empty)
    float alpha = 1.0f;
    float beta = 1.0f;
    int axis = -1;             // reduction axis (MeanRows: 0, Matmul: contraction)
    int col_begin = 0;         // SliceCols
    int col_end = 0;
    int row = 0;               // TakeRow
    std::vector<int> rows;     // SelectRows gather list
    std::vector<int> offsets;  // concat: start offset of each slot
    FrozenLayerNorm ln;        // LayerNorm
    Tensor conv_w1, conv_b1, conv_w2, conv_b2; // TokenConv
    int grid = 0;              // TokenConv token grid side
};

/// Annotations the recording model attaches for the decomposition pass.
struct NodeNotes {
    std::string stop_tag;        // component kind at a stop node ("mlp", "conv")
    int stop_layer = -1;         // forward layer index for stop_tag
    int head_group_layer = -1;   // this concat enumerates heads of layer l
    bool token_unbind = false;   // reduction axis enumerates tokens
    std::vector<int> token_map;  // local unbind index -> global token id (empty = identity)
    int token_grid = 0;          // tokens per side for ids at this node
    bool has_cls = false;        // token id 0 is the CLS slot
    int layer_entry = -1;        // residual stream entering forward layer l
};

struct GraphNode {
    NodeId id = kNoNode;
    NodeKind kind = NodeKind::Leaf;
    OpType op = OpType::Leaf;
    std::vector<NodeId> parents;
    OpMeta meta;
    std::vector<int> out_shape;
    NodeNotes notes;
};

/// Append-only record of one forward pass. Recording is single-threaded;
/// after seal() the tape is immutable and safe to read concurrently.
class Tape {
public:
    /// Record one primitive op: computes the output tensor, classifies the
    /// node and appends it. Throws std::invalid_argument on shape mismatch
    /// and std::runtime_error if the tape is sealed.
    Tensor record(OpType op, OpMeta meta, const std::vector<Tensor>& inputs);

    /// Put a plain tensor on the tape as a leaf.
    Tensor leaf(const Tensor& t);

    /// Numeric identity whose node stops graph traversal.
    Tensor detach(const Tensor& t);

    NodeKind classify(NodeId id) const;
    const GraphNode& node(NodeId id) const;
    GraphNode& node_mut(NodeId id);
    const Tensor& value(NodeId id) const;
    size_t size() const { return nodes_.size(); }

    void set_output(NodeId id);
    const std::vector<NodeId>& outputs() const { return outputs_; }

    void seal() { sealed_ = true; }
    bool sealed() const { return sealed_; }

    void set_model_info(std::string model_id, int n_layers) {
        model_id_ = std::move(model_id);
        n_layers_ = n_layers;
    }
    const std::string& model_id() const { return model_id_; }
    int n_layers() const { return n_layers_; }

    /// Line-oriented debug form: `node <id> <kind> parents=<ids> shape=<dims>`.
    std::string dump() const;

    /// Recompute every non-leaf node from its parents and compare against
    /// the recorded values bit for bit.
    bool replay_matches() const;

    /// Forward kernel shared by record() and replay.
    static Tensor compute(OpType op, OpMeta& meta, const std::vector<const Tensor*>& inputs);

private:
    std::vector<GraphNode> nodes_;
    std::vector<Tensor> values_;
    std::vector<NodeId> outputs_;
    bool sealed_ = false;
    std::string model_id_;
    int n_layers_ = 0;
};

/// Extract the linearized descriptor of a recorded LayerNorm node.
/// Throws if the node is not a LayerNorm or its statistics are missing.
FrozenLayerNorm freeze_layernorm(const Tape& tape, NodeId id);

} // namespace vitdec
