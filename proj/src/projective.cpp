#include "projprune/projective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "projprune/error.hpp"
#include "projprune/tensor.hpp"

namespace projprune {

namespace {

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericFault(std::string(what) + ": non-finite input");
}

}  // namespace

ProjectivePoint::ProjectivePoint(std::vector<double> coords) : coords_(std::move(coords)) {
    require_finite(coords_, "projective point");
    if (std::all_of(coords_.begin(), coords_.end(), [](double x) { return x == 0.0; })) {
        throw NumericFault("projective point: coordinates must not all be zero");
    }
}

ProjectivePoint ProjectivePoint::origin(std::size_t dim) {
    std::vector<double> c(dim, 0.0);
    c.at(0) = 1.0;
    return ProjectivePoint(std::move(c));
}

std::vector<double> ProjectivePoint::normalized() const {
    const double norm = l2_norm(coords_);
    double sign = 1.0;
    for (double x : coords_) {
        if (x != 0.0) {
            sign = x > 0.0 ? 1.0 : -1.0;
            break;
        }
    }
    std::vector<double> out(coords_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sign * coords_[i] / norm;
    return out;
}

bool ProjectivePoint::equals(const ProjectivePoint& other, double tol) const {
    if (dim() != other.dim()) return false;
    const auto a = normalized();
    const auto b = other.normalized();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::abs(a[i] - b[i]) > tol) return false;
    return true;
}

ProjectivePoint embed(std::span<const double> filter) {
    require_finite(filter, "embed");
    std::vector<double> c;
    c.reserve(filter.size() + 1);
    const double norm = l2_norm(filter);
    c.push_back(norm == 0.0 ? 1.0 : norm);
    c.insert(c.end(), filter.begin(), filter.end());
    return ProjectivePoint(std::move(c));
}

double angular_distance(const ProjectivePoint& p, const ProjectivePoint& q) {
    if (p.dim() != q.dim()) throw ShapeError("angular_distance: dimension mismatch");
    const double c = std::abs(dot(p.coords(), q.coords())) / (l2_norm(p.coords()) * l2_norm(q.coords()));
    return std::acos(std::clamp(c, 0.0, 1.0));
}

double proscore(std::span<const double> filter, std::span<const double> filter_grad, double d, double d_grad,
                double lambda) {
    if (filter.size() != filter_grad.size()) throw ShapeError("proscore: filter and gradient lengths differ");
    require_finite(filter, "proscore");
    require_finite(filter_grad, "proscore");
    if (!std::isfinite(d) || !std::isfinite(d_grad) || !std::isfinite(lambda)) {
        throw NumericFault("proscore: non-finite input");
    }
    if (lambda < 0.0) throw ConfigError("proscore: lambda must be >= 0");
    double num = 0.0;
    for (std::size_t i = 0; i < filter.size(); ++i) {
        const double v = filter[i] - lambda * filter_grad[i];
        num += v * v;
    }
    const double den = std::abs(d - lambda * d_grad);
    if (den < kProscoreDenominatorFloor) return std::numeric_limits<double>::infinity();
    return std::sqrt(num) / den;
}

}  // namespace projprune
