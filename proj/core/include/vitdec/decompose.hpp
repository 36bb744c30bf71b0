#pragma once

#include "vitdec/graph.hpp"

#include <compare>
#include <optional>
#include <string>
#include <vector>

namespace vitdec {

/// Identity of a model component in a decomposition. Layer indices count
/// from the final layer (the last layer is 00).
struct ComponentId {
    enum class Kind { Init, Head, Attn, Mlp, Opaque, Total };
    Kind kind = Kind::Init;
    int layer = -1; // end-indexed; -1 for Init/Total
    int head = -1;  // Head only
    std::string tag; // Opaque flavor, e.g. "conv"

    std::string label() const;
    static ComponentId init() { return {}; }
    static ComponentId mlp(int layer) { return {Kind::Mlp, layer, -1, {}}; }
    static ComponentId attn_head(int layer, int head) { return {Kind::Head, layer, head, {}}; }
    static ComponentId attn_merged(int layer) { return {Kind::Attn, layer, -1, {}}; }
    static ComponentId opaque(int layer, std::string tag) { return {Kind::Opaque, layer, -1, std::move(tag)}; }

    friend bool operator==(const ComponentId&, const ComponentId&) = default;
    int sort_rank() const;
    friend bool operator<(const ComponentId& a, const ComponentId& b);
};

ComponentId parse_component_label(const std::string& label);

/// Spatial layout of the token indices a component's contributions carry.
struct TokenDomain {
    int count = 0; // 0: component has no token split
    int grid = 0;  // tokens per side (spatial part)
    bool has_cls = false;
};

struct ComponentEntry {
    ComponentId id;
    TokenDomain tokens;
};

struct Contribution {
    ComponentId component;
    std::optional<int> token; // input-token index of the component, if split
    Tensor vector;            // same width as z
};

enum class Granularity { Component, ComponentToken };

const char* to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

/// The final representation rewritten as a sum of per-component (and
/// optionally per-token) contribution vectors.
struct Decomposition {
    std::string model_id;
    Granularity granularity = Granularity::Component;
    int n_layers_decomposed = 0;
    Tensor z;
    std::vector<ComponentEntry> components;
    std::vector<Contribution> contributions; // canonical order

    Tensor sum() const;
    /// Relative L2 reconstruction error of sum() against z.
    double residual() const;
    const Contribution* find(const ComponentId& id, int token = -1) const;
    int component_index(const ComponentId& id) const;
};

struct DecomposeOptions {
    Granularity granularity = Granularity::Component;
    int layers = -1;     // layers to decompose, counted from the last; -1 = all
    double tol = 1e-5;   // reconstruction tolerance (relative L2)
};

/// Recursive traversal of the recorded graph: distributes the final node's
/// value over the tape's linear structure and returns contributions that
/// sum back to it. Throws with a per-node residual report if the
/// reconstruction identity fails the tolerance.
Decomposition rep_decompose(const Tape& tape, NodeId final_node, const DecomposeOptions& opts = {});

enum class Collapse { Tokens, HeadsWithinLayer, All };

/// Decompositions of many images of one model, stored as one contribution
/// matrix per image over a fixed (component, token) slot table.
struct DecompositionSet {
    std::string model_id;
    std::string dataset_ref;
    Granularity granularity = Granularity::Component;
    int n_layers_decomposed = 0;
    int d = 0;
    double tol = 1e-5;
    double max_residual = 0.0;
    std::vector<ComponentEntry> components;
    struct Slot {
        int component = 0; // index into components
        int token = -1;    // -1: no token split
    };
    std::vector<Slot> slots;
    std::vector<int> image_ids; // dataset indices
    std::vector<float> contrib; // images x slots x d, row-major
    std::vector<float> zs;      // images x d

    int images() const { return static_cast<int>(image_ids.size()); }
    int n_slots() const { return static_cast<int>(slots.size()); }
    const float* contrib_at(int image, int slot) const {
        return contrib.data() + (static_cast<size_t>(image) * slots.size() + static_cast<size_t>(slot)) * d;
    }
    Tensor z_at(int image) const;
    Tensor slot_vector(int image, int slot) const;
    /// Sum of a component's slots for one image.
    Tensor component_vector(int image, int component) const;
    std::vector<int> slots_of(int component) const;
    int component_index(const ComponentId& id) const;
    double residual_of(int image) const;
    /// Re-checks the reconstruction identity for every image.
    void verify() const;

    /// Collects per-image decompositions; their slot layouts must agree.
    static DecompositionSet assemble(const std::vector<Decomposition>& decs,
                                     const std::vector<int>& image_ids, double tol);
};

/// Sum contributions sharing the coarse key. The reconstruction identity
/// is preserved exactly (fixed ascending summation order).
Decomposition reduce_decomposition(const Decomposition& dec, Collapse collapse);

// --- building blocks, exposed for tests and oracles ------------------------

/// Maps every contribution through a linear-unary node's map; additive
/// constants (biases, LayerNorm shifts) are split evenly over the n = size
/// of the list. Postcondition: sum(out) == node output when sum(in) equals
/// the node input.
std::vector<Tensor> push_linear(const Tape& tape, NodeId id, const std::vector<Tensor>& contribs);

/// Distributes a linear-binary node over both operand contribution lists.
/// Postcondition: sum(out) == node output.
std::vector<Tensor> decomp_binary(const Tape& tape, NodeId id, const std::vector<Tensor>& left,
                                  const std::vector<Tensor>& right);

/// Unbinds contributions along a reduction node's axis (or concat slots)
/// and applies the decomposed map, so that the returned list sums to the
/// node output. `per_parent` carries one contribution list per parent.
std::vector<Tensor> decomp_reduction(const Tape& tape, NodeId id,
                                     const std::vector<std::vector<Tensor>>& per_parent);

} // namespace vitdec
