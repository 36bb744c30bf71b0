#include "vitdec/decompose.hpp"

#include "vitdec/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace vitdec {

std::string ComponentId::label() const {
    char buf[64];
    switch (kind) {
        case Kind::Init: return "init";
        case Kind::Total: return "total";
        case Kind::Head:
            std::snprintf(buf, sizeof(buf), "head%02d.%d", layer, head);
            return buf;
        case Kind::Attn:
            std::snprintf(buf, sizeof(buf), "attn%02d", layer);
            return buf;
        case Kind::Mlp:
            std::snprintf(buf, sizeof(buf), "mlp%02d", layer);
            return buf;
        case Kind::Opaque:
            std::snprintf(buf, sizeof(buf), "%s%02d", tag.empty() ? "opaque" : tag.c_str(), layer);
            return buf;
    }
    return "?";
}

ComponentId parse_component_label(const std::string& s) {
    if (s == "init") return ComponentId::init();
    if (s == "total") return {ComponentId::Kind::Total, -1, -1, {}};
    auto num = [&](size_t pos) { return std::atoi(s.c_str() + pos); };
    if (s.rfind("head", 0) == 0) {
        size_t dot = s.find('.');
        if (dot == std::string::npos) throw std::invalid_argument("bad component label: " + s);
        return ComponentId::attn_head(num(4), std::atoi(s.c_str() + dot + 1));
    }
    if (s.rfind("attn", 0) == 0) return ComponentId::attn_merged(num(4));
    if (s.rfind("mlp", 0) == 0) return ComponentId::mlp(num(3));
    // opaque components are "<tag><layer>", tag is alphabetic
    size_t i = 0;
    while (i < s.size() && !std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i == 0 || i == s.size()) throw std::invalid_argument("bad component label: " + s);
    return ComponentId::opaque(num(i), s.substr(0, i));
}

int ComponentId::sort_rank() const {
    switch (kind) {
        case Kind::Init: return 0;
        case Kind::Head: return 1;
        case Kind::Attn: return 2;
        case Kind::Mlp: return 3;
        case Kind::Opaque: return 4;
        case Kind::Total: return 5;
    }
    return 6;
}

bool operator<(const ComponentId& a, const ComponentId& b) {
    int ga = a.kind == ComponentId::Kind::Init ? 0 : (a.kind == ComponentId::Kind::Total ? 2 : 1);
    int gb = b.kind == ComponentId::Kind::Init ? 0 : (b.kind == ComponentId::Kind::Total ? 2 : 1);
    int ra = a.sort_rank(), rb = b.sort_rank();
    return std::tie(ga, a.layer, ra, a.head, a.tag) < std::tie(gb, b.layer, rb, b.head, b.tag);
}

const char* to_string(Granularity g) {
    return g == Granularity::Component ? "component" : "component-token";
}

Granularity granularity_from_string(const std::string& s) {
    if (s == "component") return Granularity::Component;
    if (s == "component-token" || s == "component_token" || s == "component x token")
        return Granularity::ComponentToken;
    throw std::invalid_argument("unknown granularity: " + s);
}

Tensor Decomposition::sum() const {
    Tensor acc(z.shape);
    for (const Contribution& c : contributions) add_into(acc, c.vector);
    return acc;
}

double Decomposition::residual() const {
    double nz = l2_norm(z);
    return l2_diff(sum(), z) / std::max(nz, 1e-30);
}

const Contribution* Decomposition::find(const ComponentId& id, int token) const {
    for (const Contribution& c : contributions) {
        int t = c.token ? *c.token : -1;
        if (c.component == id && t == token) return &c;
    }
    return nullptr;
}

int Decomposition::component_index(const ComponentId& id) const {
    for (size_t i = 0; i < components.size(); ++i)
        if (components[i].id == id) return static_cast<int>(i);
    return -1;
}

// --- shared linear-map primitives -------------------------------------------

namespace {

Tensor apply_linear_share(const GraphNode& n, const Tensor& c, double share) {
    OpMeta meta = n.meta;
    switch (n.op) {
        case OpType::Scale:
        case OpType::Transpose:
        case OpType::SliceCols:
        case OpType::SelectRows:
        case OpType::TakeRow: {
            std::vector<const Tensor*> in{&c};
            return Tape::compute(n.op, meta, in);
        }
        case OpType::Affine: {
            if (!meta.bias.data.empty() && share != 1.0)
                for (float& b : meta.bias.data) b = static_cast<float>(b * share);
            std::vector<const Tensor*> in{&c};
            return Tape::compute(OpType::Affine, meta, in);
        }
        case OpType::LayerNorm:
            return n.meta.ln.push_share(c, share);
        default:
            throw std::invalid_argument(std::string("push_linear: node is not linear-unary (op ") +
                                        to_string(n.op) + ")");
    }
}

Tensor zeropad_cols(const Tensor& c, int offset, int total) {
    Tensor out({c.dim(0), total});
    for (int r = 0; r < c.dim(0); ++r)
        for (int j = 0; j < c.dim(1); ++j) out.at(r, offset + j) = c.at(r, j);
    return out;
}

Tensor zeropad_rows(const Tensor& c, int offset, int total) {
    Tensor out({total, c.dim(1)});
    for (int r = 0; r < c.dim(0); ++r)
        for (int j = 0; j < c.dim(1); ++j) out.at(offset + r, j) = c.at(r, j);
    return out;
}

/// One term of the unbound matmul: U[:,t] outer V[t,:].
Tensor matmul_token_term(const Tensor& u, const Tensor& v, int t) {
    const int m = u.dim(0), n = v.dim(1), k = u.dim(1);
    (void)k;
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.at(i, j) = u.at(i, t) * v.at(t, j);
    return out;
}

Tensor mean_rows_map(const Tensor& c) {
    OpMeta meta;
    std::vector<const Tensor*> in{&c};
    return Tape::compute(OpType::MeanRows, meta, in);
}

Tensor matmul_map(const Tensor& a, const Tensor& b) {
    OpMeta meta;
    std::vector<const Tensor*> in{&a, &b};
    return Tape::compute(OpType::Matmul, meta, in);
}

Tensor mean_row_term(const Tensor& c, int r) {
    Tensor out({c.dim(1)});
    const float inv = 1.0f / static_cast<float>(c.dim(0));
    for (int j = 0; j < c.dim(1); ++j) out.data[j] = c.at(r, j) * inv;
    return out;
}

bool all_zero(const Tensor& t) {
    for (float v : t.data)
        if (v != 0.0f) return false;
    return true;
}

} // namespace

std::vector<Tensor> push_linear(const Tape& tape, NodeId id, const std::vector<Tensor>& contribs) {
    const GraphNode& n = tape.node(id);
    if (n.kind != NodeKind::LinearUnary)
        throw std::invalid_argument("push_linear: node " + std::to_string(id) + " is not linear-unary");
    std::vector<Tensor> out;
    out.reserve(contribs.size());
    const double share = 1.0 / static_cast<double>(contribs.size());
    for (const Tensor& c : contribs) out.push_back(apply_linear_share(n, c, share));
    return out;
}

std::vector<Tensor> decomp_binary(const Tape& tape, NodeId id, const std::vector<Tensor>& left,
                                  const std::vector<Tensor>& right) {
    const GraphNode& n = tape.node(id);
    if (n.kind != NodeKind::LinearBinary)
        throw std::invalid_argument("decomp_binary: node " + std::to_string(id) + " is not linear-binary");
    std::vector<Tensor> out;
    out.reserve(left.size() + right.size());
    for (const Tensor& c : left) {
        Tensor t = c;
        if (n.meta.alpha != 1.0f)
            for (float& v : t.data) v *= n.meta.alpha;
        out.push_back(std::move(t));
    }
    for (const Tensor& c : right) {
        Tensor t = c;
        if (n.meta.beta != 1.0f)
            for (float& v : t.data) v *= n.meta.beta;
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<Tensor> decomp_reduction(const Tape& tape, NodeId id,
                                     const std::vector<std::vector<Tensor>>& per_parent) {
    const GraphNode& n = tape.node(id);
    if (n.kind != NodeKind::LinearReduction)
        throw std::invalid_argument("decomp_reduction: node " + std::to_string(id) + " is not linear-reduction");
    if (per_parent.size() != n.parents.size())
        throw std::invalid_argument("decomp_reduction: expected one contribution list per parent");
    std::vector<Tensor> out;
    switch (n.op) {
        case OpType::MeanRows: {
            if (n.meta.axis != 0) throw std::invalid_argument("decomp_reduction: axis missing");
            for (const Tensor& c : per_parent[0])
                for (int r = 0; r < c.dim(0); ++r) out.push_back(mean_row_term(c, r));
            return out;
        }
        case OpType::ConcatCols: {
            int total = n.out_shape[1];
            for (size_t s = 0; s < per_parent.size(); ++s)
                for (const Tensor& c : per_parent[s]) out.push_back(zeropad_cols(c, n.meta.offsets[s], total));
            return out;
        }
        case OpType::ConcatRows: {
            int total = n.out_shape[0];
            for (size_t s = 0; s < per_parent.size(); ++s)
                for (const Tensor& c : per_parent[s]) out.push_back(zeropad_rows(c, n.meta.offsets[s], total));
            return out;
        }
        case OpType::Matmul: {
            if (n.meta.axis != 1) throw std::invalid_argument("decomp_reduction: axis missing");
            for (const Tensor& u : per_parent[0])
                for (const Tensor& v : per_parent[1])
                    for (int t = 0; t < u.dim(1); ++t) out.push_back(matmul_token_term(u, v, t));
            return out;
        }
        default:
            throw std::invalid_argument("decomp_reduction: unsupported reduction op");
    }
}

// --- the traversal -----------------------------------------------------------

namespace {

struct Term {
    int comp = -1; // registry index, -1 unassigned
    int token = -1;
    int token_grid = 0;
    bool has_cls = false;
    NodeId origin = kNoNode;
    // Additive constants (biases, LayerNorm shifts) are shared out in
    // proportion to this weight. An unbound reduction leaves each piece at
    // the parent's weight; skipping the unbind multiplies the weight by the
    // piece count instead, so both granularities hand every component the
    // same total share and reducing tokens reproduces the component run.
    double weight = 1.0;
    Tensor value;
};

class Decomposer {
public:
    Decomposer(const Tape& tape, const DecomposeOptions& opts)
        : tape_(tape), opts_(opts) {
        int total = tape.n_layers();
        int k = opts.layers < 0 ? total : opts.layers;
        if (k > total)
            throw std::invalid_argument("rep_decompose: layers_to_decompose " + std::to_string(k) +
                                        " exceeds model depth " + std::to_string(total));
        stop_layer_ = total - k;
    }

    const std::vector<Term>& decompose(NodeId id) {
        auto it = memo_.find(id);
        if (it != memo_.end()) return it->second;
        std::vector<Term> out = compute_terms(id);
        return memo_.emplace(id, std::move(out)).first->second;
    }

    int intern(const ComponentId& c) {
        for (size_t i = 0; i < registry_.size(); ++i)
            if (registry_[i] == c) return static_cast<int>(i);
        registry_.push_back(c);
        return static_cast<int>(registry_.size()) - 1;
    }

    const std::vector<ComponentId>& registry() const { return registry_; }
    int end_layer(int forward_layer) const { return tape_.n_layers() - 1 - forward_layer; }

    std::string residual_report() const;

private:
    std::vector<Term> compute_terms(NodeId id);
    std::vector<Term> stop_term(const GraphNode& n);

    const Tape& tape_;
    DecomposeOptions opts_;
    int stop_layer_ = 0;
    std::unordered_map<NodeId, std::vector<Term>> memo_;
    std::vector<ComponentId> registry_;
};

std::vector<Term> Decomposer::stop_term(const GraphNode& n) {
    const Tensor& v = tape_.value(n.id);
    if (n.kind == NodeKind::Leaf && all_zero(v)) return {}; // additive identity drops out
    Term t;
    t.origin = n.id;
    t.value = v;
    t.value.node = kNoNode;
    if (!n.notes.stop_tag.empty()) {
        int le = end_layer(n.notes.stop_layer);
        if (n.notes.stop_tag == "mlp")
            t.comp = intern(ComponentId::mlp(le));
        else
            t.comp = intern(ComponentId::opaque(le, n.notes.stop_tag));
    }
    return {std::move(t)};
}

std::vector<Term> Decomposer::compute_terms(NodeId id) {
    const GraphNode& n = tape_.node(id);

    // Residual stream entering the first layer that is not decomposed:
    // everything upstream accumulates into the single init contribution.
    if (n.notes.layer_entry >= 0 && n.notes.layer_entry == stop_layer_) {
        Term t;
        t.comp = intern(ComponentId::init());
        t.origin = id;
        t.value = tape_.value(id);
        t.value.node = kNoNode;
        return {std::move(t)};
    }

    switch (n.kind) {
        case NodeKind::Leaf:
        case NodeKind::Detach:
        case NodeKind::Nonlinear:
            return stop_term(n);

        case NodeKind::LinearUnary: {
            const std::vector<Term>& child = decompose(n.parents[0]);
            std::vector<Term> out;
            out.reserve(child.size());
            double total_weight = 0.0;
            for (const Term& c : child) total_weight += c.weight;
            for (const Term& c : child) {
                Term t = c;
                t.value = apply_linear_share(n, c.value, c.weight / total_weight);
                out.push_back(std::move(t));
            }
            return out;
        }

        case NodeKind::LinearBinary: {
            const std::vector<Term>& left = decompose(n.parents[0]);
            const std::vector<Term>& right = decompose(n.parents[1]);
            std::vector<Term> out;
            out.reserve(left.size() + right.size());
            for (const Term& c : left) {
                Term t = c;
                if (n.meta.alpha != 1.0f)
                    for (float& v : t.value.data) v *= n.meta.alpha;
                out.push_back(std::move(t));
            }
            for (const Term& c : right) {
                Term t = c;
                if (n.meta.beta != 1.0f)
                    for (float& v : t.value.data) v *= n.meta.beta;
                out.push_back(std::move(t));
            }
            return out;
        }

        case NodeKind::LinearReduction: {
            std::vector<Term> out;
            if (n.op == OpType::ConcatCols || n.op == OpType::ConcatRows) {
                const bool cols = n.op == OpType::ConcatCols;
                const int total = cols ? n.out_shape[1] : n.out_shape[0];
                for (size_t s = 0; s < n.parents.size(); ++s) {
                    const std::vector<Term>& child = decompose(n.parents[s]);
                    for (const Term& c : child) {
                        Term t = c;
                        t.value = cols ? zeropad_cols(c.value, n.meta.offsets[s], total)
                                       : zeropad_rows(c.value, n.meta.offsets[s], total);
                        if (n.notes.head_group_layer >= 0 && t.comp < 0)
                            t.comp = intern(ComponentId::attn_head(end_layer(n.notes.head_group_layer),
                                                                   static_cast<int>(s)));
                        out.push_back(std::move(t));
                    }
                }
                return out;
            }
            if (n.op == OpType::MeanRows) {
                const std::vector<Term>& child = decompose(n.parents[0]);
                const bool split = opts_.granularity == Granularity::ComponentToken && n.notes.token_unbind;
                for (const Term& c : child) {
                    if (split && c.token < 0) {
                        for (int r = 0; r < c.value.dim(0); ++r) {
                            Term t = c;
                            t.value = mean_row_term(c.value, r);
                            t.token = n.notes.token_map.empty() ? r : n.notes.token_map[r];
                            t.token_grid = n.notes.token_grid;
                            t.has_cls = n.notes.has_cls;
                            out.push_back(std::move(t));
                        }
                    } else {
                        Term t = c;
                        t.value = mean_rows_map(c.value);
                        if (n.notes.token_unbind && c.token < 0)
                            t.weight = c.weight * static_cast<double>(c.value.dim(0));
                        out.push_back(std::move(t));
                    }
                }
                return out;
            }
            if (n.op == OpType::Matmul) {
                const std::vector<Term>& left = decompose(n.parents[0]);
                const std::vector<Term>& right = decompose(n.parents[1]);
                const bool want_split =
                    opts_.granularity == Granularity::ComponentToken && n.notes.token_unbind;
                for (const Term& u : left) {
                    for (const Term& v : right) {
                        Term base;
                        if (u.comp >= 0 && v.comp >= 0)
                            throw std::runtime_error(
                                "rep_decompose: matmul joins two attributed contribution sets (node " +
                                std::to_string(id) + ")");
                        base.comp = u.comp >= 0 ? u.comp : v.comp;
                        base.token = u.token >= 0 ? u.token : v.token;
                        base.token_grid = std::max(u.token_grid, v.token_grid);
                        base.has_cls = u.has_cls || v.has_cls;
                        base.weight = u.weight * v.weight;
                        base.origin = id;
                        if (want_split && base.token < 0) {
                            for (int t = 0; t < u.value.dim(1); ++t) {
                                Term term = base;
                                term.value = matmul_token_term(u.value, v.value, t);
                                term.token = n.notes.token_map.empty() ? t : n.notes.token_map[t];
                                term.token_grid = n.notes.token_grid;
                                term.has_cls = n.notes.has_cls;
                                out.push_back(std::move(term));
                            }
                        } else {
                            Term term = base;
                            term.value = matmul_map(u.value, v.value);
                            if (n.notes.token_unbind && base.token < 0)
                                term.weight = base.weight * static_cast<double>(u.value.dim(1));
                            out.push_back(std::move(term));
                        }
                    }
                }
                return out;
            }
            throw std::runtime_error("rep_decompose: unhandled reduction op on node " + std::to_string(id));
        }
    }
    throw std::runtime_error("rep_decompose: unclassifiable node " + std::to_string(id));
}

std::string Decomposer::residual_report() const {
    struct Entry {
        NodeId id;
        double rel;
    };
    std::vector<Entry> entries;
    for (const auto& [id, terms] : memo_) {
        const Tensor& v = tape_.value(id);
        Tensor acc(v.shape);
        for (const Term& t : terms) add_into(acc, t.value);
        double rel = l2_diff(acc, v) / std::max(l2_norm(v), 1e-30);
        entries.push_back({id, rel});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.rel > b.rel; });
    std::ostringstream out;
    out << "per-node residuals (worst first):";
    for (size_t i = 0; i < entries.size() && i < 8; ++i)
        out << "\n  node " << entries[i].id << " rel=" << entries[i].rel;
    return out.str();
}

} // namespace

Decomposition rep_decompose(const Tape& tape, NodeId final_node, const DecomposeOptions& opts) {
    Decomposer dec(tape, opts);
    const std::vector<Term>& terms = dec.decompose(final_node);

    Decomposition result;
    result.model_id = tape.model_id();
    result.granularity = opts.granularity;
    result.n_layers_decomposed = opts.layers < 0 ? tape.n_layers() : opts.layers;
    result.z = tape.value(final_node);
    result.z.node = kNoNode;

    // Aggregate terms into (component, token) slots, fixed traversal order.
    struct Key {
        int comp;
        int token;
        bool operator<(const Key& o) const { return std::tie(comp, token) < std::tie(o.comp, o.token); }
    };
    std::map<Key, Term> slots;
    for (const Term& t : terms) {
        if (t.comp < 0)
            throw std::runtime_error("rep_decompose: unattributed contribution from node " +
                                     std::to_string(t.origin) +
                                     " (stop node carries no component annotation)");
        if (!t.value.same_shape(result.z))
            throw std::runtime_error("rep_decompose: contribution shape " + t.value.shape_str() +
                                     " does not match representation " + result.z.shape_str());
        Key k{t.comp, t.token};
        auto it = slots.find(k);
        if (it == slots.end()) {
            slots.emplace(k, t);
        } else {
            add_into(it->second.value, t.value);
            it->second.token_grid = std::max(it->second.token_grid, t.token_grid);
            it->second.has_cls = it->second.has_cls || t.has_cls;
        }
    }

    // Canonical component table.
    std::map<ComponentId, TokenDomain> comp_table;
    for (const auto& [key, term] : slots) {
        const ComponentId& cid = dec.registry()[static_cast<size_t>(key.comp)];
        TokenDomain& dom = comp_table[cid];
        if (key.token >= 0) {
            dom.count += 1;
            dom.grid = std::max(dom.grid, term.token_grid);
            dom.has_cls = dom.has_cls || term.has_cls;
        }
    }
    for (const auto& [cid, dom] : comp_table) result.components.push_back({cid, dom});

    std::vector<std::pair<Key, const Term*>> ordered;
    ordered.reserve(slots.size());
    for (const auto& [key, term] : slots) ordered.push_back({key, &term});
    std::sort(ordered.begin(), ordered.end(), [&](const auto& a, const auto& b) {
        const ComponentId& ca = dec.registry()[static_cast<size_t>(a.first.comp)];
        const ComponentId& cb = dec.registry()[static_cast<size_t>(b.first.comp)];
        if (ca < cb) return true;
        if (cb < ca) return false;
        return a.first.token < b.first.token;
    });
    for (const auto& [key, term] : ordered) {
        Contribution c;
        c.component = dec.registry()[static_cast<size_t>(key.comp)];
        if (key.token >= 0) c.token = key.token;
        c.vector = term->value;
        result.contributions.push_back(std::move(c));
    }

    double rel = result.residual();
    if (!(rel <= opts.tol))
        throw NumericError("rep_decompose: reconstruction identity violated, relative residual " +
                                 std::to_string(rel) + " > " + std::to_string(opts.tol) + "\n" +
                                 dec.residual_report());
    return result;
}

Tensor DecompositionSet::z_at(int image) const {
    Tensor t({d});
    std::copy_n(zs.data() + static_cast<size_t>(image) * d, d, t.data.begin());
    return t;
}

Tensor DecompositionSet::slot_vector(int image, int slot) const {
    Tensor t({d});
    std::copy_n(contrib_at(image, slot), d, t.data.begin());
    return t;
}

Tensor DecompositionSet::component_vector(int image, int component) const {
    Tensor acc({d});
    for (size_t s = 0; s < slots.size(); ++s) {
        if (slots[s].component != component) continue;
        const float* p = contrib_at(image, static_cast<int>(s));
        for (int j = 0; j < d; ++j) acc.data[static_cast<size_t>(j)] += p[j];
    }
    return acc;
}

std::vector<int> DecompositionSet::slots_of(int component) const {
    std::vector<int> out;
    for (size_t s = 0; s < slots.size(); ++s)
        if (slots[s].component == component) out.push_back(static_cast<int>(s));
    return out;
}

int DecompositionSet::component_index(const ComponentId& id) const {
    for (size_t i = 0; i < components.size(); ++i)
        if (components[i].id == id) return static_cast<int>(i);
    return -1;
}

double DecompositionSet::residual_of(int image) const {
    Tensor sum({d});
    for (int s = 0; s < n_slots(); ++s) {
        const float* p = contrib_at(image, s);
        for (int j = 0; j < d; ++j) sum.data[static_cast<size_t>(j)] += p[j];
    }
    Tensor z = z_at(image);
    return l2_diff(sum, z) / std::max(l2_norm(z), 1e-30);
}

void DecompositionSet::verify() const {
    for (int i = 0; i < images(); ++i) {
        double rel = residual_of(i);
        if (!(rel <= tol))
            throw NumericError("decomposition set: reconstruction identity violated for image " +
                               std::to_string(image_ids[static_cast<size_t>(i)]) + " (relative residual " +
                               std::to_string(rel) + " > " + std::to_string(tol) + ")");
    }
}

DecompositionSet DecompositionSet::assemble(const std::vector<Decomposition>& decs,
                                            const std::vector<int>& ids, double tol) {
    if (decs.empty()) throw std::invalid_argument("decomposition set: empty");
    if (ids.size() != decs.size()) throw std::invalid_argument("decomposition set: id count mismatch");
    DecompositionSet set;
    const Decomposition& first = decs[0];
    set.model_id = first.model_id;
    set.granularity = first.granularity;
    set.n_layers_decomposed = first.n_layers_decomposed;
    set.d = first.z.dim(0);
    set.tol = tol;
    set.components = first.components;
    for (const Contribution& c : first.contributions) {
        Slot slot;
        slot.component = first.component_index(c.component);
        slot.token = c.token ? *c.token : -1;
        set.slots.push_back(slot);
    }
    set.image_ids = ids;
    set.contrib.resize(decs.size() * set.slots.size() * static_cast<size_t>(set.d));
    set.zs.resize(decs.size() * static_cast<size_t>(set.d));
    for (size_t i = 0; i < decs.size(); ++i) {
        const Decomposition& dec = decs[i];
        if (dec.contributions.size() != set.slots.size() || dec.z.dim(0) != set.d ||
            dec.model_id != set.model_id)
            throw std::invalid_argument("decomposition set: slot layout mismatch at image " +
                                        std::to_string(ids[i]));
        for (size_t s = 0; s < dec.contributions.size(); ++s) {
            const Contribution& c = dec.contributions[s];
            int token = c.token ? *c.token : -1;
            if (set.slots[s].component != first.component_index(c.component) || set.slots[s].token != token)
                throw std::invalid_argument("decomposition set: slot layout mismatch at image " +
                                            std::to_string(ids[i]));
            std::copy(c.vector.data.begin(), c.vector.data.end(),
                      set.contrib.begin() + ((i * set.slots.size() + s) * static_cast<size_t>(set.d)));
        }
        std::copy(dec.z.data.begin(), dec.z.data.end(), set.zs.begin() + i * static_cast<size_t>(set.d));
        set.max_residual = std::max(set.max_residual, dec.residual());
    }
    return set;
}

Decomposition reduce_decomposition(const Decomposition& dec, Collapse collapse) {
    Decomposition out;
    out.model_id = dec.model_id;
    out.n_layers_decomposed = dec.n_layers_decomposed;
    out.z = dec.z;

    auto aggregate = [&](auto&& key_fn, Granularity g) {
        out.granularity = g;
        std::map<std::pair<ComponentId, int>, Tensor> slots;
        for (const Contribution& c : dec.contributions) {
            auto key = key_fn(c);
            auto it = slots.find(key);
            if (it == slots.end())
                slots.emplace(key, c.vector);
            else
                add_into(it->second, c.vector);
        }
        std::map<ComponentId, TokenDomain> table;
        for (const auto& [key, vec] : slots) {
            Contribution c;
            c.component = key.first;
            if (key.second >= 0) c.token = key.second;
            c.vector = vec;
            out.contributions.push_back(std::move(c));
            TokenDomain& dom = table[key.first];
            if (key.second >= 0) dom.count += 1;
        }
        // carry spatial layout through when tokens survive
        for (auto& [cid, dom] : table) {
            if (dom.count == 0) continue;
            for (const ComponentEntry& e : dec.components) {
                bool merged_head = cid.kind == ComponentId::Kind::Attn &&
                                   e.id.kind == ComponentId::Kind::Head && e.id.layer == cid.layer;
                if (e.id == cid || merged_head) {
                    dom.grid = std::max(dom.grid, e.tokens.grid);
                    dom.has_cls = dom.has_cls || e.tokens.has_cls;
                }
            }
        }
        for (const auto& [cid, dom] : table) out.components.push_back({cid, dom});
    };

    switch (collapse) {
        case Collapse::Tokens: {
            if (dec.granularity != Granularity::ComponentToken)
                throw std::invalid_argument("reduce_decomposition: no token axis to collapse");
            aggregate([](const Contribution& c) { return std::make_pair(c.component, -1); },
                      Granularity::Component);
            break;
        }
        case Collapse::HeadsWithinLayer: {
            bool any = false;
            for (const Contribution& c : dec.contributions)
                any = any || c.component.kind == ComponentId::Kind::Head;
            if (!any)
                throw std::invalid_argument("reduce_decomposition: no per-head contributions to collapse");
            aggregate(
                [](const Contribution& c) {
                    ComponentId id = c.component;
                    if (id.kind == ComponentId::Kind::Head) id = ComponentId::attn_merged(id.layer);
                    return std::make_pair(id, c.token ? *c.token : -1);
                },
                dec.granularity);
            break;
        }
        case Collapse::All: {
            aggregate([](const Contribution&) {
                return std::make_pair(ComponentId{ComponentId::Kind::Total, -1, -1, {}}, -1);
            },
                      Granularity::Component);
            break;
        }
    }
    return out;
}

} // namespace vitdec
