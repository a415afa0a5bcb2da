#include "fabric/harness/stats.hpp"

#include <cmath>
#include <stdexcept>

namespace fabric::harness {

double binomial_upper_tail(int n, int k) {
    if (n < 0) throw std::invalid_argument("binomial_upper_tail: n must be >= 0");
    if (k <= 0) return 1.0;
    if (k > n) return 0.0;
    double tail = 0.0;
    for (int i = k; i <= n; ++i) {
        tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
    }
    return std::min(tail, 1.0);
}

SignTest sign_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("sign_test: samples must be paired");
    SignTest t;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > b[i]) ++t.wins;
        else if (a[i] < b[i]) ++t.losses;
        else ++t.ties;
    }
    t.p_value = binomial_upper_tail(t.wins + t.losses, t.wins);
    return t;
}

nlohmann::json SignTest::to_json() const {
    return {{"wins", wins}, {"losses", losses}, {"ties", ties}, {"p_value", p_value}, {"significant", significant()}};
}

}  // namespace fabric::harness
