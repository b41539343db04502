#pragma once

#include <span>
#include <vector>

namespace projprune {

inline constexpr double kProjectiveEqualityTol = 1e-12;

// A point of oriented real projective space: a nonzero vector in R^{N+1},
// identified with every positive multiple of itself.
class ProjectivePoint {
public:
    explicit ProjectivePoint(std::vector<double> coords);

    // [1:0:...:0], the axis of the extra coordinate, in R^{dim}.
    static ProjectivePoint origin(std::size_t dim);

    std::span<const double> coords() const { return coords_; }
    std::size_t dim() const { return coords_.size(); }

    // Unit-norm representative with the first nonzero coordinate positive.
    std::vector<double> normalized() const;

    // Equality of normalized representatives within `tol` per coordinate.
    bool equals(const ProjectivePoint& other, double tol) const;
    // Normalized coordinates agree to kProjectiveEqualityTol; rescaling by
    // an arbitrary c > 0 is only exact up to rounding.
    bool operator==(const ProjectivePoint& other) const { return equals(other, kProjectiveEqualityTol); }

private:
    std::vector<double> coords_;
};

// F -> [||F|| : F_1 : ... : F_N]; the zero filter maps to [1:0:...:0].
ProjectivePoint embed(std::span<const double> filter);

// Angle between the two lines through the origin, in [0, pi/2].
double angular_distance(const ProjectivePoint& p, const ProjectivePoint& q);

// Denominators below this magnitude give an infinite score.
inline constexpr double kProscoreDenominatorFloor = 1e-12;

// tan of the angle between the origin axis and the point
// (D - lambda*dD, F - lambda*dF):
//   ||F - lambda*dF|| / |D - lambda*dD|
// Returns +inf when the denominator vanishes.
double proscore(std::span<const double> filter, std::span<const double> filter_grad, double d, double d_grad,
                double lambda);

}  // namespace projprune
