#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "invlab/group.hpp"
#include "invlab/loss.hpp"
#include "invlab/rng.hpp"
#include "invlab/symmetrize.hpp"
#include "invlab/vecmath.hpp"

namespace invlab {

enum class Activation { relu, tanh_fn, identity };

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh_fn: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh_fn;
    if (s == "identity") return Activation::identity;
    throw std::invalid_argument("unknown activation: " + s);
}

struct Layer {
    enum class Kind { dense, activation, average };
    Kind kind = Kind::dense;
    std::size_t width = 0;          // dense
    bool bias = true;               // dense
    Activation act = Activation::identity;  // activation
    SymmetrizationMode mode;        // average

    static Layer dense(std::size_t width, bool bias = true) {
        Layer l;
        l.kind = Kind::dense;
        l.width = width;
        l.bias = bias;
        return l;
    }
    static Layer activation(Activation a) {
        Layer l;
        l.kind = Kind::activation;
        l.act = a;
        return l;
    }
    static Layer average(SymmetrizationMode m) {
        Layer l;
        l.kind = Kind::average;
        l.mode = m;
        return l;
    }
};

// Architecture description: an ordered layer list with at most one averaging
// layer. The averaging layer makes the model invariant by evaluating the
// prefix h_1..h_{d-1} on every transform g x of the input and combining the
// results (mean for exact/Monte Carlo modes, coordinatewise extremum for the
// pooling modes) before the suffix h_d..h_D runs once.
struct ModelSpec {
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    std::vector<Layer> layers;
    GroupPtr group;  // required iff an average layer is present

    std::optional<std::size_t> averaging_index() const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].kind == Layer::Kind::average) return i;
        return std::nullopt;
    }

    void validate() const {
        if (input_dim == 0 || output_dim == 0)
            throw std::invalid_argument("model dims must be positive");
        std::size_t cur = input_dim;
        int n_avg = 0;
        for (const auto& l : layers) {
            switch (l.kind) {
                case Layer::Kind::dense:
                    if (l.width == 0) throw std::invalid_argument("dense width must be positive");
                    cur = l.width;
                    break;
                case Layer::Kind::activation:
                    break;
                case Layer::Kind::average:
                    ++n_avg;
                    break;
            }
        }
        if (cur != output_dim) throw std::invalid_argument("layer dims do not chain to output_dim");
        if (n_avg > 1) throw std::invalid_argument("at most one averaging layer allowed");
        if (n_avg == 1) {
            if (!group) throw std::invalid_argument("averaging layer requires a group");
            if (group->input_dim() != input_dim)
                throw std::invalid_argument("averaging group must act on the model input");
            if (layers[*averaging_index()].mode.kind == SymmetrizationMode::Kind::monte_carlo) {
                const auto& m = layers[*averaging_index()].mode;
                if (m.resample == SymmetrizationMode::Resample::fixed)
                    for (ElementId g : m.fixed_set)
                        if (g >= group->size())
                            throw std::invalid_argument("fixed g_set element outside group");
            }
        }
    }

    // True when the model is exactly one dense layer (a linear model).
    bool is_linear() const {
        return layers.size() == 1 && layers[0].kind == Layer::Kind::dense;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["input_dim"] = input_dim;
        j["output_dim"] = output_dim;
        nlohmann::json ls = nlohmann::json::array();
        for (const auto& l : layers) {
            nlohmann::json e;
            switch (l.kind) {
                case Layer::Kind::dense:
                    e["kind"] = "dense";
                    e["width"] = l.width;
                    e["bias"] = l.bias;
                    break;
                case Layer::Kind::activation:
                    e["kind"] = "activation";
                    e["act"] = activation_name(l.act);
                    break;
                case Layer::Kind::average:
                    e["kind"] = "average";
                    e["mode"] = l.mode.str();
                    e["k"] = l.mode.k;
                    e["fixed_set"] = l.mode.fixed_set;
                    break;
            }
            ls.push_back(std::move(e));
        }
        j["layers"] = std::move(ls);
        if (group) j["group"] = group->name();
        return j;
    }

    static ModelSpec from_json(const nlohmann::json& j, GroupPtr group = nullptr) {
        ModelSpec s;
        s.input_dim = j.at("input_dim").get<std::size_t>();
        s.output_dim = j.at("output_dim").get<std::size_t>();
        for (const auto& e : j.at("layers")) {
            const std::string kind = e.at("kind").get<std::string>();
            if (kind == "dense") {
                s.layers.push_back(Layer::dense(e.at("width").get<std::size_t>(),
                                                e.at("bias").get<bool>()));
            } else if (kind == "activation") {
                s.layers.push_back(Layer::activation(activation_from_name(e.at("act"))));
            } else if (kind == "average") {
                const std::string mode = e.at("mode").get<std::string>();
                SymmetrizationMode m;
                if (mode == "exact") m = SymmetrizationMode::exact();
                else if (mode == "max_pool") m = SymmetrizationMode::max_pool();
                else if (mode == "min_pool") m = SymmetrizationMode::min_pool();
                else if (mode.rfind("mc(", 0) == 0) {
                    auto fixed = e.at("fixed_set").get<std::vector<ElementId>>();
                    if (!fixed.empty()) m = SymmetrizationMode::monte_carlo_fixed(fixed);
                    else m = SymmetrizationMode::monte_carlo(e.at("k").get<int>());
                } else {
                    throw std::invalid_argument("unknown averaging mode: " + mode);
                }
                s.layers.push_back(Layer::average(m));
            } else {
                throw std::invalid_argument("unknown layer kind: " + kind);
            }
        }
        if (j.contains("group")) {
            if (!group) throw std::invalid_argument("model spec references group '" +
                                                    j.at("group").get<std::string>() +
                                                    "' but none was supplied");
            if (group->name() != j.at("group").get<std::string>())
                throw std::invalid_argument("supplied group does not match model spec");
            s.group = std::move(group);
        }
        s.validate();
        return s;
    }
};

// Flat parameter vector plus the (offset, shape) layout of each dense layer.
struct ParamLayout {
    struct DenseSlot {
        std::size_t layer_index = 0;
        std::size_t offset = 0;  // weight block, rows x cols row-major
        std::size_t rows = 0;
        std::size_t cols = 0;
        std::size_t bias_offset = 0;  // == npos when the layer has no bias
        static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    };
    std::vector<DenseSlot> dense;
    std::size_t total = 0;

    static ParamLayout of(const ModelSpec& spec) {
        spec.validate();
        ParamLayout lay;
        std::size_t cur = spec.input_dim;
        std::size_t off = 0;
        for (std::size_t i = 0; i < spec.layers.size(); ++i) {
            const auto& l = spec.layers[i];
            if (l.kind != Layer::Kind::dense) continue;
            DenseSlot s;
            s.layer_index = i;
            s.offset = off;
            s.rows = l.width;
            s.cols = cur;
            off += s.rows * s.cols;
            if (l.bias) {
                s.bias_offset = off;
                off += s.rows;
            } else {
                s.bias_offset = DenseSlot::npos;
            }
            lay.dense.push_back(s);
            cur = l.width;
        }
        lay.total = off;
        return lay;
    }
};

struct ParamVector {
    Vec values;

    std::size_t size() const { return values.size(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
};

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) per dense layer;
// biases start at zero.
inline ParamVector init_params(const ModelSpec& spec, SplitRng& rng) {
    auto lay = ParamLayout::of(spec);
    ParamVector p;
    p.values.assign(lay.total, 0.0);
    for (const auto& s : lay.dense) {
        double a = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
        for (std::size_t i = 0; i < s.rows * s.cols; ++i)
            p.values[s.offset + i] = rng.uniform(-a, a);
    }
    return p;
}

// Runtime randomness for Monte Carlo averaging layers: fresh draws need an
// rng; an externally fixed element set (e.g. one draw reused per epoch)
// overrides the mode's own policy.
struct FaContext {
    SplitRng* rng = nullptr;
    const std::vector<ElementId>* fixed_set = nullptr;
};

namespace detail_model {

inline void apply_dense(const ParamLayout::DenseSlot& s, const Vec& params, const Vec& in,
                        Vec& out) {
    out.assign(s.rows, 0.0);
    for (std::size_t r = 0; r < s.rows; ++r) {
        double acc = 0.0;
        const double* w = params.data() + s.offset + r * s.cols;
        for (std::size_t c = 0; c < s.cols; ++c) acc += w[c] * in[c];
        if (s.bias_offset != ParamLayout::DenseSlot::npos) acc += params[s.bias_offset + r];
        out[r] = acc;
    }
}

inline void apply_activation(Activation a, Vec& v) {
    switch (a) {
        case Activation::relu:
            for (double& x : v) x = x > 0.0 ? x : 0.0;
            break;
        case Activation::tanh_fn:
            for (double& x : v) x = std::tanh(x);
            break;
        case Activation::identity:
            break;
    }
}

// Applies layers [from, to), treating any averaging layer as identity.
inline Vec run_segment(const ModelSpec& spec, const ParamLayout& lay, const ParamVector& p,
                       Vec v, std::size_t from, std::size_t to) {
    std::size_t dense_idx = 0;
    while (dense_idx < lay.dense.size() && lay.dense[dense_idx].layer_index < from) ++dense_idx;
    for (std::size_t i = from; i < to; ++i) {
        const auto& l = spec.layers[i];
        if (l.kind == Layer::Kind::dense) {
            Vec out;
            apply_dense(lay.dense[dense_idx], p.values, v, out);
            v = std::move(out);
            ++dense_idx;
        } else if (l.kind == Layer::Kind::activation) {
            apply_activation(l.act, v);
        }
    }
    return v;
}

inline std::vector<ElementId> averaging_set(const SymmetrizationMode& mode,
                                            const GroupAction& group, const FaContext* ctx) {
    switch (mode.kind) {
        case SymmetrizationMode::Kind::exact:
        case SymmetrizationMode::Kind::max_pool:
        case SymmetrizationMode::Kind::min_pool:
            return group.all_elements();
        case SymmetrizationMode::Kind::monte_carlo: {
            if (ctx && ctx->fixed_set) return *ctx->fixed_set;
            if (mode.resample == SymmetrizationMode::Resample::fixed) {
                if (mode.fixed_set.empty())
                    throw std::invalid_argument(
                        "epoch-fixed monte_carlo averaging requires a context-supplied set");
                return mode.fixed_set;
            }
            if (!ctx || !ctx->rng)
                throw std::invalid_argument(
                    "monte_carlo averaging with fresh draws requires an rng context");
            std::vector<ElementId> s(static_cast<std::size_t>(mode.k));
            for (auto& g : s) g = group.sample_uniform(*ctx->rng);
            return s;
        }
    }
    return {};
}

// Branch inputs for the averaging layer. Full-group deterministic modes sort
// the transformed inputs lexicographically, so the branch sequence (and hence
// the averaged output) is bit-identical across an orbit under permutation
// actions.
inline std::vector<Vec> branch_inputs(const ModelSpec& spec, const Vec& x, const FaContext* ctx) {
    const auto& mode = spec.layers[*spec.averaging_index()].mode;
    const auto& group = *spec.group;
    auto g_set = averaging_set(mode, group, ctx);
    std::vector<Vec> ins;
    ins.reserve(g_set.size());
    for (ElementId g : g_set) ins.push_back(group.act(g, x));
    if (mode.kind != SymmetrizationMode::Kind::monte_carlo) std::sort(ins.begin(), ins.end());
    return ins;
}

} // namespace detail_model

// Deterministic forward pass. With an exact averaging layer the output is
// G-invariant in x (bit-exact under permutation actions).
inline Vec forward(const ModelSpec& spec, const ParamVector& params, const Vec& x,
                   const FaContext* ctx = nullptr) {
    if (x.size() != spec.input_dim) throw std::invalid_argument("forward: input dim mismatch");
    auto lay = ParamLayout::of(spec);
    if (params.size() != lay.total) throw std::invalid_argument("forward: param size mismatch");
    auto d = spec.averaging_index();
    if (!d) return detail_model::run_segment(spec, lay, params, x, 0, spec.layers.size());

    const auto& mode = spec.layers[*d].mode;
    auto ins = detail_model::branch_inputs(spec, x, ctx);

    Vec combined;
    const bool pool_max = mode.kind == SymmetrizationMode::Kind::max_pool;
    const bool pool_min = mode.kind == SymmetrizationMode::Kind::min_pool;
    for (const Vec& bx : ins) {
        Vec u = detail_model::run_segment(spec, lay, params, bx, 0, *d);
        if (combined.empty()) {
            combined = std::move(u);
        } else if (pool_max || pool_min) {
            for (std::size_t i = 0; i < combined.size(); ++i)
                combined[i] = pool_max ? std::max(combined[i], u[i]) : std::min(combined[i], u[i]);
        } else {
            axpy(1.0, u, combined);
        }
    }
    if (!pool_max && !pool_min)
        combined = (1.0 / static_cast<double>(ins.size())) * std::move(combined);
    return detail_model::run_segment(spec, lay, params, std::move(combined), *d + 1,
                                     spec.layers.size());
}

// Forward pass with the averaging layer bypassed (single-sample evaluation of
// an FA architecture; the identity path h_D..h_1(x)).
inline Vec forward_plain(const ModelSpec& spec, const ParamVector& params, const Vec& x) {
    if (x.size() != spec.input_dim) throw std::invalid_argument("forward: input dim mismatch");
    auto lay = ParamLayout::of(spec);
    if (params.size() != lay.total) throw std::invalid_argument("forward: param size mismatch");
    return detail_model::run_segment(spec, lay, params, x, 0, spec.layers.size());
}

inline VecFn model_fn(const ModelSpec& spec, const ParamVector& params,
                      const FaContext* ctx = nullptr) {
    return [&spec, &params, ctx](const Vec& x) { return forward(spec, params, x, ctx); };
}

// --- Linear-model weight symmetrization ---------------------------------------

// For a one-layer linear model, the weights of the symmetrized predictor:
// each weight row becomes its average dual action over the group, so that
// f_{w°}(x) = S_G f_w(x) for every x. Bias rows are untouched (the group acts
// on inputs only). This is the projection onto the invariant weight subspace.
inline ParamVector symmetrize_linear_weights(const ModelSpec& spec, const ParamVector& w,
                                             const GroupAction& group) {
    if (!spec.is_linear()) throw std::domain_error("symmetrize_linear_weights: model is not linear");
    if (group.input_dim() != spec.input_dim)
        throw std::invalid_argument("group does not act on model input");
    auto lay = ParamLayout::of(spec);
    if (w.size() != lay.total) throw std::invalid_argument("param size mismatch");
    const auto& slot = lay.dense[0];
    ParamVector out = w;
    for (std::size_t r = 0; r < slot.rows; ++r) {
        Vec row(slot.cols);
        for (std::size_t c = 0; c < slot.cols; ++c) row[c] = w.values[slot.offset + r * slot.cols + c];
        Vec acc(slot.cols, 0.0);
        for (ElementId g = 0; g < group.size(); ++g) axpy(1.0, group.dual_action(g, row), acc);
        for (std::size_t c = 0; c < slot.cols; ++c)
            out.values[slot.offset + r * slot.cols + c] = acc[c] / static_cast<double>(group.size());
    }
    return out;
}

// Euclidean distance of a linear model's weights from the invariant subspace;
// zero iff the model is G-invariant.
inline double invariant_projection_residual(const ModelSpec& spec, const ParamVector& w,
                                            const GroupAction& group) {
    ParamVector proj = symmetrize_linear_weights(spec, w, group);
    auto lay = ParamLayout::of(spec);
    const auto& slot = lay.dense[0];
    double s = 0.0;
    for (std::size_t i = 0; i < slot.rows * slot.cols; ++i) {
        double d = w.values[slot.offset + i] - proj.values[slot.offset + i];
        s += d * d;
    }
    return std::sqrt(s);
}

// --- Checkpoint file -----------------------------------------------------------
// One JSON header line (spec, seed, training mode, parameter count) followed
// by the raw little-endian 64-bit float parameter block.

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct Checkpoint {
    ModelSpec spec;
    ParamVector params;
    std::uint64_t seed = 0;
    std::string mode;
};

inline void save_checkpoint(const std::string& path, const ModelSpec& spec,
                            const ParamVector& params, std::uint64_t seed,
                            const std::string& mode) {
    nlohmann::json header;
    header["spec"] = spec.to_json();
    header["seed"] = seed;
    header["mode"] = mode;
    header["param_count"] = params.size();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f << header.dump() << '\n';
    f.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path, GroupPtr group = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("checkpoint missing header: " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    Checkpoint ck;
    ck.spec = ModelSpec::from_json(header.at("spec"), std::move(group));
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.mode = header.at("mode").get<std::string>();
    std::size_t n = header.at("param_count").get<std::size_t>();
    ck.params.values.assign(n, 0.0);
    f.read(reinterpret_cast<char*>(ck.params.values.data()),
           static_cast<std::streamsize>(n * sizeof(double)));
    if (static_cast<std::size_t>(f.gcount()) != n * sizeof(double))
        throw std::runtime_error("checkpoint truncated: " + path);
    return ck;
}

} // namespace invlab
