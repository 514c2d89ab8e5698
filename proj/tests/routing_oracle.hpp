#pragma once

// Straight-line scripted implementation of routing by agreement, kept
// deliberately independent of the library tensors. Children vote for
// parents; coupling per child is the softmax of its log priors over the
// parent axis; parents are squashed weighted vote sums; priors accumulate
// the vote/parent scalar products.

#include <cmath>
#include <vector>

namespace capseg::testing {

struct OracleRouting {
    // votes[n][j][d]
    std::vector<std::vector<std::vector<double>>> parents_per_iter;  // [t][j][d]
    std::vector<std::vector<std::vector<double>>> coupling_per_iter; // [t][n][j]
    std::vector<std::vector<double>> final_parents;                  // [j][d]
    std::vector<std::vector<double>> final_priors;                   // [n][j]
};

inline std::vector<double> oracle_squash(const std::vector<double>& s) {
    double n2 = 0.0;
    for (double x : s) n2 += x * x;
    std::vector<double> v(s.size(), 0.0);
    if (n2 == 0.0) return v;
    const double norm = std::sqrt(n2);
    const double scale = (n2 / (1.0 + n2)) / norm;
    for (size_t i = 0; i < s.size(); ++i) v[i] = s[i] * scale;
    return v;
}

inline OracleRouting oracle_routing(
    const std::vector<std::vector<std::vector<double>>>& votes, int iterations,
    std::vector<std::vector<double>> priors) {
    const size_t n = votes.size();
    const size_t j = votes[0].size();
    const size_t d = votes[0][0].size();
    OracleRouting out;
    std::vector<std::vector<double>> v(j, std::vector<double>(d, 0.0));
    std::vector<std::vector<double>> c(n, std::vector<double>(j, 0.0));
    for (int t = 0; t < iterations; ++t) {
        for (size_t i = 0; i < n; ++i) {
            double mx = priors[i][0];
            for (size_t p = 1; p < j; ++p) mx = std::max(mx, priors[i][p]);
            double denom = 0.0;
            for (size_t p = 0; p < j; ++p) denom += std::exp(priors[i][p] - mx);
            for (size_t p = 0; p < j; ++p) c[i][p] = std::exp(priors[i][p] - mx) / denom;
        }
        for (size_t p = 0; p < j; ++p) {
            std::vector<double> s(d, 0.0);
            for (size_t i = 0; i < n; ++i)
                for (size_t e = 0; e < d; ++e) s[e] += c[i][p] * votes[i][p][e];
            v[p] = oracle_squash(s);
        }
        for (size_t i = 0; i < n; ++i)
            for (size_t p = 0; p < j; ++p) {
                double agree = 0.0;
                for (size_t e = 0; e < d; ++e) agree += votes[i][p][e] * v[p][e];
                priors[i][p] += agree;
            }
        out.parents_per_iter.push_back(v);
        out.coupling_per_iter.push_back(c);
    }
    out.final_parents = v;
    out.final_priors = priors;
    return out;
}

}  // namespace capseg::testing
