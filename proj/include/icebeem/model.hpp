#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "icebeem/mlp.hpp"

namespace icebeem {

enum class ModelMode : std::uint8_t {
    plain = 0,     // E(x|y) = f(x) . g(y)
    positive = 1,  // f constrained to the non-negative orthant by a relu output
    augmented = 2  // E(x|y) = H(f(x)) . g(y) with H interleaving (f_i, f_i^2)
};

inline const char* to_string(ModelMode m) {
    switch (m) {
        case ModelMode::plain: return "plain";
        case ModelMode::positive: return "positive";
        case ModelMode::augmented: return "augmented";
    }
    return "?";
}

inline ModelMode model_mode_from_string(const std::string& s) {
    if (s == "plain") return ModelMode::plain;
    if (s == "positive") return ModelMode::positive;
    if (s == "augmented") return ModelMode::augmented;
    throw std::invalid_argument("unknown model mode: " + s);
}

/// Embedding of the discrete conditioning variable. The default is a
/// learnable lookup table with one row per segment; an MLP over a one-hot
/// encoding is available as a variant.
struct ConditionEmbedding {
    enum class Kind : std::uint8_t { lookup = 0, network = 1 };

    Kind kind = Kind::lookup;
    Matrix lookup;                 // M x d_g
    std::optional<MlpNet> network; // one-hot input of width M

    static ConditionEmbedding make_lookup(Matrix table) {
        ConditionEmbedding g;
        g.kind = Kind::lookup;
        g.lookup = std::move(table);
        return g;
    }

    static ConditionEmbedding make_network(MlpNet net) {
        ConditionEmbedding g;
        g.kind = Kind::network;
        g.network = std::move(net);
        return g;
    }

    std::size_t num_segments() const {
        return kind == Kind::lookup ? lookup.rows() : network->input_dim();
    }
    std::size_t dim() const {
        return kind == Kind::lookup ? lookup.cols() : network->output_dim();
    }

    Vector embed(std::size_t y) const {
        if (y >= num_segments())
            throw std::invalid_argument("ConditionEmbedding: segment " + std::to_string(y) +
                                        " out of range");
        if (kind == Kind::lookup) return lookup.row(y);
        Vector onehot(network->input_dim(), 0.0);
        onehot[y] = 1.0;
        return forward(*network, onehot).output;
    }
};

/// The conditional energy model E(x|y) = feature(x) . g(y). No normalizing
/// constant is ever computed; all estimators are normalization-free.
struct IceBeemModel {
    MlpNet f;
    ConditionEmbedding g;
    ModelMode mode = ModelMode::plain;

    std::size_t input_dim() const { return f.input_dim(); }
    std::size_t latent_dim() const { return f.output_dim(); }
    std::size_t feature_dim() const {
        return mode == ModelMode::augmented ? 2 * latent_dim() : latent_dim();
    }
    std::size_t num_segments() const { return g.num_segments(); }

    void validate() const {
        if (mode == ModelMode::positive && f.spec.output_activation != OutputActivation::relu)
            throw std::invalid_argument("IceBeemModel: positive mode requires a relu output on f");
        if (g.dim() != feature_dim())
            throw std::invalid_argument("IceBeemModel: condition dim " + std::to_string(g.dim()) +
                                        " != feature dim " + std::to_string(feature_dim()));
    }
};

/// Interleaves (f_1, f_1^2, f_2, f_2^2, ...).
inline Vector augment_square(const Vector& f) {
    Vector out(2 * f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
        out[2 * i] = f[i];
        out[2 * i + 1] = f[i] * f[i];
    }
    return out;
}

inline Vector feature_from_output(const IceBeemModel& model, const Vector& f_out) {
    return model.mode == ModelMode::augmented ? augment_square(f_out) : f_out;
}

inline Vector feature(const IceBeemModel& model, const Vector& x) {
    return feature_from_output(model, forward(model.f, x).output);
}

inline double energy(const IceBeemModel& model, const Vector& x, std::size_t y) {
    return dot(feature(model, x), model.g.embed(y));
}

/// The vector v_eff with score(x,y) = -J_f(x)^T v_eff, together with the
/// diagonal sensitivity d v_eff / d f needed to backpropagate through the
/// feature-dependent part of v_eff (nonzero only in augmented mode).
struct EffectiveCondition {
    Vector v;           // length d_z
    Vector dv_df_diag;  // length d_z
};

inline EffectiveCondition effective_condition(const IceBeemModel& model, const ForwardTrace& trace,
                                              std::size_t y) {
    const Vector gy = model.g.embed(y);
    const std::size_t dz = model.latent_dim();
    EffectiveCondition ec;
    ec.dv_df_diag.assign(dz, 0.0);
    switch (model.mode) {
        case ModelMode::plain:
            ec.v = gy;
            break;
        case ModelMode::positive:
            // subgradient convention 1[f > 0], matching the trace's output mask
            ec.v = hadamard(gy, trace.masks.back());
            break;
        case ModelMode::augmented: {
            ec.v.resize(dz);
            const Vector& f = trace.output;
            for (std::size_t i = 0; i < dz; ++i) {
                ec.v[i] = gy[2 * i] + 2.0 * f[i] * gy[2 * i + 1];
                ec.dv_df_diag[i] = 2.0 * gy[2 * i + 1];
            }
            break;
        }
    }
    return ec;
}

/// del_x log p(x|y) = -del_x E(x|y).
inline Vector score(const IceBeemModel& model, const Vector& x, std::size_t y) {
    const ForwardTrace trace = forward(model.f, x);
    const EffectiveCondition ec = effective_condition(model, trace, y);
    return -1.0 * input_vjp(model.f, trace, ec.v);
}

// ---------------------------------------------------------------------------
// Flat parameter view: [f weights and biases | g lookup rows or g network]
// ---------------------------------------------------------------------------

inline std::size_t num_model_params(const IceBeemModel& m) {
    const std::size_t g_count = m.g.kind == ConditionEmbedding::Kind::lookup
                                    ? m.g.lookup.size()
                                    : m.g.network->num_params();
    return m.f.num_params() + g_count;
}

inline Vector model_params(const IceBeemModel& m) {
    Vector flat = flatten_params(m.f);
    if (m.g.kind == ConditionEmbedding::Kind::lookup) {
        flat.insert(flat.end(), m.g.lookup.data(), m.g.lookup.data() + m.g.lookup.size());
    } else {
        const Vector g_flat = flatten_params(*m.g.network);
        flat.insert(flat.end(), g_flat.begin(), g_flat.end());
    }
    return flat;
}

inline void set_model_params(IceBeemModel& m, const Vector& flat) {
    if (flat.size() != num_model_params(m))
        throw std::invalid_argument("set_model_params: length mismatch");
    const std::size_t nf = m.f.num_params();
    set_params(m.f, Vector(flat.begin(), flat.begin() + nf));
    if (m.g.kind == ConditionEmbedding::Kind::lookup) {
        std::copy(flat.begin() + nf, flat.end(), m.g.lookup.data());
    } else {
        set_params(*m.g.network, Vector(flat.begin() + nf, flat.end()));
    }
}

}  // namespace icebeem
