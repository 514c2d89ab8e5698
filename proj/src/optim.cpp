#include "capseg/optim.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace capseg {

void adam_step(AdamState& state, const std::vector<NamedTensor>& params,
               const std::map<std::string, Tensor>& grads) {
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);

    for (const auto& [name, param] : params) {
        auto git = grads.find(name);
        if (git == grads.end())
            throw ContractError("adam_step: missing gradient for parameter '" + name + "'");
        const Tensor& grad = git->second;
        check_shape(grad.shape() == param.shape(),
                    "adam_step: gradient shape " + shape_str(grad.shape()) +
                        " does not match parameter '" + name + "' " + shape_str(param.shape()));

        auto& mom = state.moments[name];
        const auto n = static_cast<size_t>(param.numel());
        if (mom.m.empty()) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        check_contract(mom.m.size() == n, "adam_step: moment size mismatch for '" + name + "'");

        const double* g = grad.data();
        double* p = const_cast<Tensor&>(param).data();
        for (size_t i = 0; i < n; ++i) {
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

void adam_step(AdamState& state, const std::vector<NamedTensor>& params) {
    std::map<std::string, Tensor> grads;
    for (const auto& [name, param] : params) {
        if (!param.has_grad())
            throw ContractError("adam_step: parameter '" + name + "' has no gradient");
        grads.emplace(name, param.grad());
    }
    adam_step(state, params, grads);
}

// ---------------------------------------------------------------------------

std::string GradcheckReport::table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %14s %14s %14s\n", "parameter", "max_rel_err",
                  "max_analytic", "max_numeric");
    os << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-28s %14.6e %14.6e %14.6e\n", r.name.c_str(),
                      r.max_rel_error, r.max_analytic, r.max_numeric);
        os << line;
    }
    std::snprintf(line, sizeof line, "overall max relative error: %.6e (tolerance %.1e) %s\n",
                  max_rel_error, tolerance, passed() ? "OK" : "FAIL");
    os << line;
    return os.str();
}

GradcheckReport gradcheck(const std::function<Tensor()>& f,
                          const std::vector<NamedTensor>& params, double eps,
                          double tolerance) {
    check_contract(eps > 0.0, "gradcheck: eps must be positive");
    GradcheckReport report;
    report.tolerance = tolerance;

    for (const auto& [name, p] : params) {
        check_contract(p.requires_grad(), "gradcheck: parameter '" + name + "' must require grad");
        const_cast<Tensor&>(p).zero_grad();
    }

    Tensor loss = f();
    if (!std::isfinite(loss.item())) {
        report.finite = false;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        return report;
    }
    backward(loss);

    std::map<std::string, std::vector<double>> analytic;
    for (const auto& [name, p] : params) analytic[name] = p.grad().to_vec();

    for (const auto& [name, p] : params) {
        GradcheckRow row;
        row.name = name;
        auto& param = const_cast<Tensor&>(p);
        double* data = param.data();
        const std::int64_t n = param.numel();
        const auto& a = analytic[name];
        for (std::int64_t i = 0; i < n; ++i) {
            const double saved = data[i];
            const double h = eps * (1.0 + std::abs(saved));
            data[i] = saved + h;
            const double fp = f().item();
            data[i] = saved - h;
            const double fm = f().item();
            data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                report.finite = false;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double ana = a[static_cast<size_t>(i)];
            const double rel =
                std::abs(ana - numeric) / std::max(1e-12, std::abs(ana) + std::abs(numeric));
            row.max_rel_error = std::max(row.max_rel_error, rel);
            row.max_analytic = std::max(row.max_analytic, std::abs(ana));
            row.max_numeric = std::max(row.max_numeric, std::abs(numeric));
        }
        report.max_rel_error = std::max(report.max_rel_error, row.max_rel_error);
        report.rows.push_back(std::move(row));
    }
    if (!report.finite) report.max_rel_error = std::numeric_limits<double>::infinity();
    return report;
}

}  // namespace capseg
