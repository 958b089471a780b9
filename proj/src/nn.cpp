#include "dtlsd/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dtlsd {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Parameter& ParamStore::create(const std::string& name, Tensor init) {
    if (index_.count(name)) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    if (!init.all_finite()) {
        throw std::invalid_argument("non-finite init for parameter: " + name);
    }
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(init);
    p->grad = Tensor(p->value.shape());
    p->adam_m = Tensor(p->value.shape());
    p->adam_v = Tensor(p->value.shape());
    Parameter& ref = *p;
    index_[name] = owned_.size();
    order_.push_back(p.get());
    owned_.push_back(std::move(p));
    return ref;
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : order_[it->second];
}

const Parameter* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : order_[it->second];
}

void ParamStore::zero_grads() {
    for (Parameter* p : order_) p->zero_grad();
}

std::size_t ParamStore::total_values() const {
    std::size_t n = 0;
    for (const Parameter* p : order_) n += p->value.size();
    return n;
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
    return t;
}

Tensor normal_init(const std::vector<std::size_t>& shape, double sigma, Rng& rng) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, sigma);
    return t;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

LinearLayer LinearLayer::make(ParamStore& store, const std::string& name,
                              std::size_t d_in, std::size_t d_out, Rng& rng) {
    LinearLayer l;
    l.w = &store.create(name + ".w", xavier_uniform(d_in, d_out, rng));
    l.b = &store.create(name + ".b", Tensor({d_out}));
    return l;
}

ag::Var LinearLayer::forward(ag::Tape& tape, ag::Var x) const {
    return ag::linear(x, tape.leaf(*w), tape.leaf(*b));
}

LayerNormLayer LayerNormLayer::make(ParamStore& store, const std::string& name,
                                    std::size_t dim) {
    LayerNormLayer l;
    l.gain = &store.create(name + ".gain", Tensor::full({dim}, 1.0));
    l.bias = &store.create(name + ".bias", Tensor({dim}));
    return l;
}

ag::Var LayerNormLayer::forward(ag::Tape& tape, ag::Var x) const {
    return ag::layer_norm(x, tape.leaf(*gain), tape.leaf(*bias));
}

MlpLayer MlpLayer::make(ParamStore& store, const std::string& name,
                        const std::vector<std::size_t>& dims, Rng& rng) {
    if (dims.size() < 2) {
        throw std::invalid_argument("mlp needs at least input and output dims");
    }
    MlpLayer m;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        m.layers.push_back(LinearLayer::make(
            store, name + ".fc" + std::to_string(i), dims[i], dims[i + 1], rng));
    }
    return m;
}

ag::Var MlpLayer::forward(ag::Tape& tape, ag::Var x) const {
    ag::Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(tape, h);
        if (i + 1 < layers.size()) h = ag::gelu(h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void adamw_step(std::span<Parameter* const> params, const AdamWConfig& cfg, long t) {
    if (cfg.lr <= 0.0) throw std::invalid_argument("adamw: lr must be positive");
    if (t < 1) throw std::invalid_argument("adamw: step index must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (Parameter* p : params) {
        double* v = p->value.data();
        double* g = p->grad.data();
        double* m = p->adam_m.data();
        double* s = p->adam_v.data();
        const std::size_t n = p->value.size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            s[i] = cfg.beta2 * s[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double shat = s[i] / bc2;
            // Decoupled decay: applied to the value itself, not to the
            // gradient, so the moment estimates never see it.
            v[i] -= cfg.lr * cfg.weight_decay * v[i];
            v[i] -= cfg.lr * mhat / (std::sqrt(shat) + cfg.eps);
            g[i] = 0.0;
        }
    }
}

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw std::invalid_argument("adamw: lr must be positive");
}

void AdamW::step() {
    ++t_;
    adamw_step(std::span<Parameter* const>(params_.data(), params_.size()), cfg_, t_);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<ag::Var(ag::Tape&)>& build_loss,
                           std::span<Parameter* const> params, double h) {
    if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

    for (Parameter* p : params) p->zero_grad();
    {
        ag::Tape tape;
        ag::Var loss = build_loss(tape);
        const Tensor& lv = tape.value(loss);
        if (lv.size() != 1) {
            throw std::invalid_argument("grad_check: loss must be scalar");
        }
        if (!lv.all_finite()) {
            throw std::runtime_error("grad_check: non-finite loss");
        }
        tape.backward(loss);
    }

    auto eval = [&]() {
        ag::Tape tape;
        ag::Var loss = build_loss(tape);
        const double v = tape.value(loss)[0];
        if (!std::isfinite(v)) {
            throw std::runtime_error("grad_check: non-finite loss during probe");
        }
        return v;
    };

    GradCheckReport rep;
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double lp = eval();
            p->value[i] = saved - h;
            const double lm = eval();
            p->value[i] = saved;

            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic = p->grad[i];
            const double denom =
                std::max({1.0, std::abs(analytic), std::abs(numeric)});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p->name;
                rep.worst_index = i;
            }
            ++rep.values_checked;
        }
    }
    return rep;
}

}  // namespace dtlsd
