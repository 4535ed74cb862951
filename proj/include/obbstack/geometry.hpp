#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "obbstack/error.hpp"

namespace obbstack {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kHalfPi = std::numbers::pi / 2.0;

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(double s, Point a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Point&, const Point&) = default;
};

inline double cross(Point a, Point b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point a) { return std::hypot(a.x, a.y); }

/// Oriented rectangle. Canonical form: w >= h > 0, theta in [0, pi) measured from
/// the x-axis to the long side; squares keep theta in [0, pi/2).
struct OBB {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;
  double theta = 0.0;

  double area() const { return w * h; }
  friend bool operator==(const OBB&, const OBB&) = default;
};

/// Four rectangle corners, counterclockwise (in a y-up frame).
using CornerQuad = std::array<Point, 4>;

namespace detail {

// Reduces t into [0, period). fmod is exact, but adding the period back can
// round up to the period itself, hence the final check.
inline double reduce_angle(double t, double period) {
  double r = std::fmod(t, period);
  if (r < 0.0) r += period;
  if (r >= period) r = 0.0;
  return r;
}

inline bool finite_all(std::initializer_list<double> vs) {
  return std::all_of(vs.begin(), vs.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace detail

inline OBB canonicalize(double x, double y, double w, double h, double theta) {
  if (!detail::finite_all({x, y, w, h, theta}))
    throw InvalidGeometry("non-finite box parameter");
  if (!(w > 0.0) || !(h > 0.0))
    throw InvalidGeometry("extents must be positive (w=" + detail::fmt_double(w, "%g") +
                          ", h=" + detail::fmt_double(h, "%g") + ")");
  if (w < h) {
    std::swap(w, h);
    theta += kHalfPi;
  }
  theta = detail::reduce_angle(theta, w == h ? kHalfPi : kPi);
  return OBB{x, y, w, h, theta};
}

inline OBB canonicalize(const OBB& b) { return canonicalize(b.x, b.y, b.w, b.h, b.theta); }

inline bool is_canonical(const OBB& b) {
  return detail::finite_all({b.x, b.y, b.w, b.h, b.theta}) && b.h > 0.0 && b.w >= b.h &&
         b.theta >= 0.0 && b.theta < (b.w == b.h ? kHalfPi : kPi);
}

inline CornerQuad obb_to_corners(const OBB& b) {
  const double c = std::cos(b.theta);
  const double s = std::sin(b.theta);
  const Point u{0.5 * b.w * c, 0.5 * b.w * s};   // half long axis
  const Point v{-0.5 * b.h * s, 0.5 * b.h * c};  // half short axis
  const Point ctr{b.x, b.y};
  return {ctr - u - v, ctr + u - v, ctr + u + v, ctr - u + v};
}

/// Twice the signed area; positive for counterclockwise polygons.
template <typename Polygon>
double signed_area2(const Polygon& poly) {
  double acc = 0.0;
  const std::size_t n = std::size(poly);
  for (std::size_t i = 0; i < n; ++i) acc += cross(poly[i], poly[(i + 1) % n]);
  return acc;
}

inline CornerQuad canonical_winding(CornerQuad q) {
  if (signed_area2(q) < 0.0) std::reverse(q.begin(), q.end());
  return q;
}

/// Fits an OBB to four (possibly imperfect) rectangle corners by averaging each
/// pair of opposite edges. Winding direction does not matter.
inline OBB corners_to_obb(const CornerQuad& q) {
  for (const auto& p : q)
    if (!detail::finite_all({p.x, p.y})) throw InvalidGeometry("non-finite corner");

  std::array<Point, 4> e;
  for (int i = 0; i < 4; ++i) e[i] = q[(i + 1) % 4] - q[i];
  for (const auto& edge : e)
    if (norm(edge) < 1e-6) throw InvalidGeometry("degenerate quad (edge shorter than 1e-6 px)");

  const Point center = 0.25 * (q[0] + q[1] + q[2] + q[3]);
  // Opposite edges point in opposite directions, so subtracting sums them up.
  const Point dir_a = e[0] - e[2];
  const Point dir_b = e[1] - e[3];
  double len_a = 0.5 * (norm(e[0]) + norm(e[2]));
  double len_b = 0.5 * (norm(e[1]) + norm(e[3]));

  if (std::abs(len_a - len_b) <= 1e-12 * std::max(len_a, len_b)) {
    const double side = 0.5 * (len_a + len_b);
    return canonicalize(center.x, center.y, side, side, std::atan2(dir_a.y, dir_a.x));
  }
  if (len_a >= len_b) return canonicalize(center.x, center.y, len_a, len_b, std::atan2(dir_a.y, dir_a.x));
  return canonicalize(center.x, center.y, len_b, len_a, std::atan2(dir_b.y, dir_b.x));
}

namespace detail {

// Sutherland-Hodgman: clip a convex polygon by the left half-plane of edge a->b.
inline void clip_half_plane(const std::vector<Point>& in, Point a, Point b, std::vector<Point>& out) {
  out.clear();
  const Point edge = b - a;
  const std::size_t n = in.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point p = in[i];
    const Point q = in[(i + 1) % n];
    const double dp = cross(edge, p - a);
    const double dq = cross(edge, q - a);
    if (dp >= 0.0) out.push_back(p);
    if ((dp >= 0.0) != (dq >= 0.0)) {
      const double t = dp / (dp - dq);
      out.push_back(p + t * (q - p));
    }
  }
}

inline bool obb_less(const OBB& a, const OBB& b) {
  return std::tie(a.x, a.y, a.w, a.h, a.theta) < std::tie(b.x, b.y, b.w, b.h, b.theta);
}

}  // namespace detail

/// Exact area of the intersection of two rectangles.
inline double intersection_area(const OBB& a_in, const OBB& b_in) {
  // Fixed argument order makes the result bitwise symmetric.
  const bool swap = detail::obb_less(b_in, a_in);
  const OBB& a = swap ? b_in : a_in;
  const OBB& b = swap ? a_in : b_in;

  const double reach = 0.5 * (std::hypot(a.w, a.h) + std::hypot(b.w, b.h));
  if (std::hypot(a.x - b.x, a.y - b.y) >= reach) return 0.0;

  const CornerQuad qa = obb_to_corners(a);
  const CornerQuad qb = obb_to_corners(b);
  std::vector<Point> poly(qa.begin(), qa.end());
  std::vector<Point> scratch;
  poly.reserve(8);
  scratch.reserve(8);
  for (int i = 0; i < 4 && !poly.empty(); ++i) {
    detail::clip_half_plane(poly, qb[i], qb[(i + 1) % 4], scratch);
    poly.swap(scratch);
  }
  if (poly.size() < 3) return 0.0;
  return std::max(0.0, 0.5 * signed_area2(poly));
}

inline double iou(const OBB& a, const OBB& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Signed difference theta1 - theta2 folded into [-pi/2, pi/2], treating
/// orientations as undirected lines.
inline double relative_angle(double theta1, double theta2) {
  auto in_domain = [](double t) { return std::isfinite(t) && t >= 0.0 && t < kPi; };
  if (!in_domain(theta1) || !in_domain(theta2))
    throw DomainError("relative_angle expects angles in [0, pi)");
  const double d = theta1 - theta2;
  if (std::abs(d) <= kHalfPi) return d;
  if (d < -kHalfPi) return d + kPi;
  return d - kPi;
}

}  // namespace obbstack
