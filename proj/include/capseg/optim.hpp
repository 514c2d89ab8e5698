#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capseg/tensor.hpp"

namespace capseg {

using NamedTensor = std::pair<std::string, Tensor>;

struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
};

// Adam state plus the scheduling bookkeeping the training loop persists
// across checkpoints (current lr, best validation metric, staleness).
struct AdamState {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step_count = 0;
    std::map<std::string, AdamMoments> moments;
    double best_metric = -1.0;
    std::int64_t since_improve = 0;
};

// One Adam update. Every parameter must have an entry in `grads`
// (ContractError otherwise); moment buffers are created on first use.
void adam_step(AdamState& state, const std::vector<NamedTensor>& params,
               const std::map<std::string, Tensor>& grads);

// Convenience: pulls gradients materialized on the parameters by backward().
void adam_step(AdamState& state, const std::vector<NamedTensor>& params);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradcheckRow {
    std::string name;
    double max_rel_error = 0.0;
    double max_analytic = 0.0;
    double max_numeric = 0.0;
};

struct GradcheckReport {
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool finite = true;  // false if the objective produced non-finite values
    std::vector<GradcheckRow> rows;
    bool passed() const { return finite && max_rel_error < tolerance; }
    std::string table() const;
};

// Central differences (f(x+h) - f(x-h)) / 2h per element, h scaled by the
// element magnitude, against the analytic gradient from backward().
// f must rebuild its graph from the current parameter values on every call.
GradcheckReport gradcheck(const std::function<Tensor()>& f,
                          const std::vector<NamedTensor>& params, double eps,
                          double tolerance);

}  // namespace capseg
