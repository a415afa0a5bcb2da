#pragma once

#include <span>

#include <json.hpp>

namespace fabric::harness {

inline constexpr double kSignificance = 0.05;

/// Paired one-sided sign test of "a > b" with ties dropped.
struct SignTest {
    int wins = 0;
    int losses = 0;
    int ties = 0;
    /// P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
    double p_value = 1.0;

    bool significant() const noexcept { return p_value < kSignificance; }
    nlohmann::json to_json() const;
};

SignTest sign_test(std::span<const double> a, std::span<const double> b);

/// Upper binomial tail P(X >= k) for X ~ Binomial(n, 1/2).
double binomial_upper_tail(int n, int k);

}  // namespace fabric::harness
