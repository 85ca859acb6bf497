#pragma once

#include <span>
#include <string>

#include <json.hpp>

namespace codiff::metrics {

double mse(std::span<const double> y, std::span<const double> y_hat);
double mae(std::span<const double> y, std::span<const double> y_hat);

// Over all pairs with y_i > y_j (label ties excluded), the fraction whose
// predictions agree in order; prediction ties count one half. Throws when no
// pair is comparable.
double concordance_index(std::span<const double> y, std::span<const double> y_hat);

struct Rm2Terms {
    double r2 = 0.0;        // squared Pearson correlation
    double r02 = 0.0;       // through-origin coefficient
    double radicand = 0.0;  // r2 - r02 before clipping
    double rm2 = 0.0;
};

// r_m^2 = r^2 (1 - sqrt(r^2 - r0^2)) with r0^2 from the through-origin fit
// y ~ k * y_hat, k = sum(y * y_hat) / sum(y_hat^2). The radicand is clipped to
// [0, 1] so the result stays in [0, 1].
Rm2Terms rm2_terms(std::span<const double> y, std::span<const double> y_hat);
double rm2(std::span<const double> y, std::span<const double> y_hat);

inline constexpr const char* kR0Convention = "through-origin slope k = sum(y*yhat)/sum(yhat^2); r0^2 = 1 - sum((y - k*yhat)^2)/sum((y - mean(y))^2)";
inline constexpr const char* kClipRule = "radicand r^2 - r0^2 clipped to [0, 1]";

struct MetricsReport {
    std::string setting;
    std::size_t n = 0;
    double mse = 0.0;
    double mae = 0.0;
    double ci = 0.0;
    double rm2 = 0.0;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

// Errors from the individual metrics are rethrown prefixed with the setting.
MetricsReport evaluate(std::span<const double> y, std::span<const double> y_hat, const std::string& setting);

}  // namespace codiff::metrics
