#include "codiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace codiff::metrics {

namespace {

void require_pairs(std::span<const double> y, std::span<const double> y_hat, std::size_t min_n, const char* name) {
    if (y.size() != y_hat.size())
        throw std::invalid_argument(std::string(name) + ": length mismatch (" + std::to_string(y.size()) + " vs " +
                                    std::to_string(y_hat.size()) + ")");
    if (y.size() < min_n)
        throw std::invalid_argument(std::string(name) + ": need at least " + std::to_string(min_n) + " values, got " +
                                    std::to_string(y.size()));
}

}  // namespace

double mse(std::span<const double> y, std::span<const double> y_hat) {
    require_pairs(y, y_hat, 1, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
    return s / static_cast<double>(y.size());
}

double mae(std::span<const double> y, std::span<const double> y_hat) {
    require_pairs(y, y_hat, 1, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
    return s / static_cast<double>(y.size());
}

double concordance_index(std::span<const double> y, std::span<const double> y_hat) {
    require_pairs(y, y_hat, 2, "concordance_index");
    double h = 0.0;
    std::size_t z = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (!(y[i] > y[j])) continue;
            ++z;
            const double d = y_hat[i] - y_hat[j];
            if (d > 0.0)
                h += 1.0;
            else if (d == 0.0)
                h += 0.5;
        }
    }
    if (z == 0) throw std::domain_error("concordance_index: no comparable pairs (all labels tied)");
    return h / static_cast<double>(z);
}

Rm2Terms rm2_terms(std::span<const double> y, std::span<const double> y_hat) {
    require_pairs(y, y_hat, 3, "rm2");
    const double n = static_cast<double>(y.size());
    double mean_y = 0.0, mean_p = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        mean_y += y[i];
        mean_p += y_hat[i];
    }
    mean_y /= n;
    mean_p /= n;
    double syy = 0.0, spp = 0.0, syp = 0.0, yp = 0.0, pp = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double dy = y[i] - mean_y, dp = y_hat[i] - mean_p;
        syy += dy * dy;
        spp += dp * dp;
        syp += dy * dp;
        yp += y[i] * y_hat[i];
        pp += y_hat[i] * y_hat[i];
    }
    if (syy == 0.0 || spp == 0.0) throw std::domain_error("rm2: zero variance in labels or predictions");
    Rm2Terms t;
    t.r2 = (syp * syp) / (syy * spp);
    const double k = yp / pp;
    double sse0 = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) sse0 += (y[i] - k * y_hat[i]) * (y[i] - k * y_hat[i]);
    t.r02 = 1.0 - sse0 / syy;
    t.radicand = t.r2 - t.r02;
    t.rm2 = t.r2 * (1.0 - std::sqrt(std::clamp(t.radicand, 0.0, 1.0)));
    return t;
}

double rm2(std::span<const double> y, std::span<const double> y_hat) { return rm2_terms(y, y_hat).rm2; }

nlohmann::json MetricsReport::to_json() const {
    return {{"setting", setting},
            {"n", n},
            {"mse", mse},
            {"mae", mae},
            {"ci", ci},
            {"rm2", rm2},
            {"definitions", {{"r0_convention", kR0Convention}, {"clip", kClipRule}}}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.setting = j.at("setting").get<std::string>();
    r.n = j.at("n").get<std::size_t>();
    r.mse = j.at("mse").get<double>();
    r.mae = j.at("mae").get<double>();
    r.ci = j.at("ci").get<double>();
    r.rm2 = j.at("rm2").get<double>();
    return r;
}

MetricsReport evaluate(std::span<const double> y, std::span<const double> y_hat, const std::string& setting) {
    MetricsReport r;
    r.setting = setting;
    r.n = y.size();
    try {
        r.mse = mse(y, y_hat);
        r.mae = mae(y, y_hat);
        r.ci = concordance_index(y, y_hat);
        r.rm2 = rm2(y, y_hat);
    } catch (const std::exception& e) {
        throw std::runtime_error("setting " + setting + ": " + e.what());
    }
    return r;
}

}  // namespace codiff::metrics
