#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dtlsd/autograd.hpp"
#include "dtlsd/rng.hpp"
#include "dtlsd/tensor.hpp"

namespace dtlsd {

/// Owns every trainable parameter of a model. Parameters keep stable
/// addresses for their whole lifetime, so layers and the optimizer can hold
/// raw pointers into the store.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;

    /// Registers a new parameter under a unique name.
    Parameter& create(const std::string& name, Tensor init);

    /// Returns the parameter registered under `name`, or nullptr.
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;

    /// All parameters in creation order.
    const std::vector<Parameter*>& all() const { return order_; }

    void zero_grads();

    std::size_t count() const { return order_.size(); }
    std::size_t total_values() const;

private:
    std::vector<std::unique_ptr<Parameter>> owned_;
    std::vector<Parameter*> order_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

/// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Normal-distributed tensor of the given shape.
Tensor normal_init(const std::vector<std::size_t>& shape, double sigma, Rng& rng);

// ---------------------------------------------------------------------------
// Layers. Each layer registers its parameters in a ParamStore at build time
// and replays them onto a tape at forward time, so one set of weights can be
// evaluated on any number of tapes.
// ---------------------------------------------------------------------------

/// Affine map of row vectors: y = x W + b, W is [d_in, d_out].
struct LinearLayer {
    Parameter* w = nullptr;
    Parameter* b = nullptr;

    static LinearLayer make(ParamStore& store, const std::string& name,
                            std::size_t d_in, std::size_t d_out, Rng& rng);
    ag::Var forward(ag::Tape& tape, ag::Var x) const;
    std::size_t d_in() const { return w->value.dim(0); }
    std::size_t d_out() const { return w->value.dim(1); }
};

/// Per-row layer normalisation with learned gain and bias.
struct LayerNormLayer {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;

    static LayerNormLayer make(ParamStore& store, const std::string& name,
                               std::size_t dim);
    ag::Var forward(ag::Tape& tape, ag::Var x) const;
};

/// Stack of linear layers with GELU between them (none after the last).
struct MlpLayer {
    std::vector<LinearLayer> layers;

    static MlpLayer make(ParamStore& store, const std::string& name,
                         const std::vector<std::size_t>& dims, Rng& rng);
    ag::Var forward(ag::Tape& tape, ag::Var x) const;
};

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// One AdamW update. `t` is the 1-based step index used for bias correction.
/// Weight decay is decoupled: it scales the value directly and never touches
/// the moment estimates. Gradients are zeroed after the update.
void adamw_step(std::span<Parameter* const> params, const AdamWConfig& cfg, long t);

/// Stateful wrapper that tracks the step count; supports per-call lr override.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig cfg);

    /// Applies one update to all parameters and zeroes their gradients.
    void step();

    AdamWConfig& config() { return cfg_; }
    long steps_taken() const { return t_; }

private:
    std::vector<Parameter*> params_;
    AdamWConfig cfg_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;   ///< name of the parameter with the largest error
    std::size_t worst_index = 0;
    std::size_t values_checked = 0;
};

/// Compares tape gradients of a scalar loss against central differences.
/// `build_loss` must construct the loss on the given tape from the current
/// parameter values; it is re-evaluated (forward only) with each value of
/// each parameter perturbed by ±h. Relative error for one value is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport grad_check(const std::function<ag::Var(ag::Tape&)>& build_loss,
                           std::span<Parameter* const> params, double h = 1e-5);

}  // namespace dtlsd
