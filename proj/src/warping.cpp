#include "preshape/warping.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include <Eigen/SparseCholesky>

#include "preshape/errors.hpp"

namespace preshape {

namespace {

using Complex = std::complex<double>;

Complex to_complex(const Vec2& v) { return {v.x(), v.y()}; }
Vec2 to_vec(const Complex& c) { return {c.real(), c.imag()}; }

double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Undirected region edges; each is counted twice by the energies.
template <typename F>
void for_each_edge(const WarpGrid& grid, const GridRegion& region, F&& f) {
  for (int r = region.r0; r <= region.r1; ++r)
    for (int c = region.c0; c <= region.c1; ++c) {
      if (c < region.c1) f(grid.index(r, c), grid.index(r, c + 1));
      if (r < region.r1) f(grid.index(r, c), grid.index(r + 1, c));
    }
}

struct Triangle {
  int v[3];
};

std::vector<Triangle> region_triangles(const WarpGrid& grid, const GridRegion& region) {
  std::vector<Triangle> tris;
  for (int r = region.r0; r < region.r1; ++r)
    for (int c = region.c0; c < region.c1; ++c) {
      const int a = grid.index(r, c), b = grid.index(r, c + 1), d = grid.index(r + 1, c + 1), e = grid.index(r + 1, c);
      tris.push_back({{a, b, d}});
      tris.push_back({{a, d, e}});
    }
  return tris;
}

bool degenerate(const WarpGrid& grid, const Triangle& t) {
  return std::abs(cross(grid.rest[t.v[1]] - grid.rest[t.v[0]], grid.rest[t.v[2]] - grid.rest[t.v[0]])) < 1e-12;
}

// Deformation gradient of a triangle: deformed edge matrix times inverse rest edge matrix.
Eigen::Matrix2d deformation(const WarpGrid& grid, const Triangle& t, const std::vector<Vec2>& pos,
                            Eigen::Matrix2d* rest_inverse = nullptr) {
  Eigen::Matrix2d rest, now;
  rest.col(0) = grid.rest[t.v[1]] - grid.rest[t.v[0]];
  rest.col(1) = grid.rest[t.v[2]] - grid.rest[t.v[0]];
  now.col(0) = pos[t.v[1]] - pos[t.v[0]];
  now.col(1) = pos[t.v[2]] - pos[t.v[0]];
  const Eigen::Matrix2d inv = rest.inverse();
  if (rest_inverse) *rest_inverse = inv;
  return now * inv;
}

// Singular-value split of a 2x2 matrix: largest = q + r, smallest = |q - r|.
struct SvdTerms {
  double q, r;
  double e, f, g, h;
};

SvdTerms svd_terms(const Eigen::Matrix2d& m, double eps) {
  SvdTerms s;
  s.e = 0.5 * (m(0, 0) + m(1, 1));
  s.f = 0.5 * (m(0, 0) - m(1, 1));
  s.g = 0.5 * (m(1, 0) + m(0, 1));
  s.h = 0.5 * (m(1, 0) - m(0, 1));
  s.q = std::sqrt(s.e * s.e + s.h * s.h + eps);
  s.r = std::sqrt(s.f * s.f + s.g * s.g + eps);
  return s;
}

// Gamma + sqrt((Gamma^2 + gamma^2) / 2) = q + r + sqrt(q^2 + r^2).
double distortion(const SvdTerms& s) { return s.q + s.r + std::sqrt(s.q * s.q + s.r * s.r); }

Complex similarity_ratio(const WarpGrid& grid, int v0, int v1, int v2) {
  return (to_complex(grid.rest[v0]) - to_complex(grid.rest[v1])) / (to_complex(grid.rest[v2]) - to_complex(grid.rest[v1]));
}

struct LinearSystem {
  std::vector<int> column;  // grid point -> first unknown, or -1
  int unknowns = 0;
};

LinearSystem free_columns(const WarpGrid& grid) {
  LinearSystem sys;
  sys.column.assign(static_cast<std::size_t>(grid.size()), -1);
  for (int i = 0; i < grid.size(); ++i)
    if (grid.flags[static_cast<std::size_t>(i)] == GridFlag::Free) {
      sys.column[static_cast<std::size_t>(i)] = sys.unknowns;
      sys.unknowns += 2;
    }
  return sys;
}

// Rows of sqrt(2 w_l) (vi - vj) x e_ij and sqrt(2 w_r) (vi - vj), as
// A x - b with fixed points moved into b.
void bending_rows(const WarpGrid& grid, const GridRegion& region, const GridWeights& weights, const LinearSystem& sys,
                  const std::vector<Vec2>& pos, std::vector<double>& residual, Triplets* triplets) {
  const double sl = std::sqrt(2.0 * weights.w_l);
  const double sr = std::sqrt(2.0 * weights.w_r);
  for_each_edge(grid, region, [&](int i, int j) {
    const int ci = sys.column[static_cast<std::size_t>(i)], cj = sys.column[static_cast<std::size_t>(j)];
    if (ci < 0 && cj < 0) return;
    const Vec2 e = (grid.rest[i] - grid.rest[j]).normalized();
    const Vec2 d = pos[i] - pos[j];
    int row = static_cast<int>(residual.size());
    residual.push_back(sl * cross(d, e));
    if (triplets) {
      if (ci >= 0) {
        triplets->emplace_back(row, ci, sl * e.y());
        triplets->emplace_back(row, ci + 1, -sl * e.x());
      }
      if (cj >= 0) {
        triplets->emplace_back(row, cj, -sl * e.y());
        triplets->emplace_back(row, cj + 1, sl * e.x());
      }
    }
    for (int k = 0; k < 2; ++k) {
      row = static_cast<int>(residual.size());
      residual.push_back(sr * d(k));
      if (triplets) {
        if (ci >= 0) triplets->emplace_back(row, ci + k, sr);
        if (cj >= 0) triplets->emplace_back(row, cj + k, -sr);
      }
    }
  });
}

WarpGrid mark_region(const WarpGrid& grid, const std::vector<ControlConstraint>& constraints, const GridRegion& region) {
  WarpGrid out = grid;
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const int i = grid.index(r, c);
      if (!region.contains(r, c) || region.on_rim(r, c)) {
        out.flags[static_cast<std::size_t>(i)] = GridFlag::Fixed;
        out.positions[static_cast<std::size_t>(i)] = grid.rest[static_cast<std::size_t>(i)];
      } else {
        out.flags[static_cast<std::size_t>(i)] = GridFlag::Free;
      }
    }
  for (const auto& con : constraints) {
    if (con.index < 0 || con.index >= grid.size()) throw ArgumentError("control index out of range");
    if (out.flags[static_cast<std::size_t>(con.index)] == GridFlag::Fixed) continue;
    out.flags[static_cast<std::size_t>(con.index)] = GridFlag::Control;
    out.positions[static_cast<std::size_t>(con.index)] = con.target;
  }
  return out;
}

std::vector<Vec2> lattice_positions(const WarpGrid& grid, const LinearSystem& sys, const Eigen::VectorXd& x) {
  std::vector<Vec2> pos = grid.positions;
  for (int i = 0; i < grid.size(); ++i) {
    const int c = sys.column[static_cast<std::size_t>(i)];
    if (c >= 0) pos[static_cast<std::size_t>(i)] = Vec2(x(c), x(c + 1));
  }
  return pos;
}

Eigen::VectorXd pack_free(const WarpGrid& grid, const LinearSystem& sys) {
  Eigen::VectorXd x(sys.unknowns);
  for (int i = 0; i < grid.size(); ++i) {
    const int c = sys.column[static_cast<std::size_t>(i)];
    if (c >= 0) x.segment<2>(c) = grid.positions[static_cast<std::size_t>(i)];
  }
  return x;
}

class SparseModeProblem : public LeastSquaresProblem {
 public:
  SparseModeProblem(const WarpGrid& grid, const GridRegion& region, const GridWeights& weights)
      : grid_(grid), region_(region), weights_(weights), sys_(free_columns(grid)) {
    for (const auto& t : region_triangles(grid, region))
      if (!degenerate(grid, t)) tris_.push_back(t);
  }

  int parameter_count() const override { return sys_.unknowns; }
  const LinearSystem& system() const { return sys_; }

  bool evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const override {
    const std::vector<Vec2> pos = lattice_positions(grid_, sys_, x);
    std::vector<double> res;
    Triplets trip;
    Triplets* tp = jacobian ? &trip : nullptr;
    bending_rows(grid_, region_, weights_, sys_, pos, res, tp);

    const double sd = weights_.w_d;
    const double ss = std::sqrt(weights_.w_s);
    for (const auto& t : tris_) {
      Eigen::Matrix2d rinv;
      const Eigen::Matrix2d m = deformation(grid_, t, pos, &rinv);
      const SvdTerms s = svd_terms(m, kSmooth);
      const double dist = distortion(s);
      if (!(dist > 0.0) || !std::isfinite(dist)) return false;
      const double rv = std::sqrt(sd * dist);
      const int row = static_cast<int>(res.size());
      res.push_back(rv);
      if (tp && rv > 0.0) {
        const double root = std::sqrt(s.q * s.q + s.r * s.r);
        const double kq = 1.0 + s.q / root;
        const double kr = 1.0 + s.r / root;
        // d dist / d m(i, j)
        Eigen::Matrix2d dm;
        dm(0, 0) = kq * s.e / (2 * s.q) + kr * s.f / (2 * s.r);
        dm(1, 1) = kq * s.e / (2 * s.q) - kr * s.f / (2 * s.r);
        dm(1, 0) = kq * s.h / (2 * s.q) + kr * s.g / (2 * s.r);
        dm(0, 1) = -kq * s.h / (2 * s.q) + kr * s.g / (2 * s.r);
        // m = [p1 - p0, p2 - p0] * rinv, so d m / d p_k(a) = unit_a * coeff_k
        const Eigen::RowVector2d c1 = rinv.row(0), c2 = rinv.row(1);
        const Eigen::RowVector2d c0 = -(c1 + c2);
        const Eigen::RowVector2d coeff[3] = {c0, c1, c2};
        const double scale = sd / (2.0 * rv);
        for (int k = 0; k < 3; ++k) {
          const int col = sys_.column[static_cast<std::size_t>(t.v[k])];
          if (col < 0) continue;
          for (int a = 0; a < 2; ++a) {
            const double g = dm.row(a).dot(coeff[k]);
            tp->emplace_back(row, col + a, scale * g);
          }
        }
      }

      for (int rot = 0; rot < 3; ++rot) {
        const int v0 = t.v[rot], v1 = t.v[(rot + 1) % 3], v2 = t.v[(rot + 2) % 3];
        const Complex ratio = similarity_ratio(grid_, v0, v1, v2);
        const Complex r = (to_complex(pos[v0]) - to_complex(pos[v1])) - ratio * (to_complex(pos[v2]) - to_complex(pos[v1]));
        const int row0 = static_cast<int>(res.size());
        res.push_back(ss * r.real());
        res.push_back(ss * r.imag());
        if (!tp) continue;
        // Complex multiplication by ratio as a real 2x2 block.
        Eigen::Matrix2d mr;
        mr << ratio.real(), -ratio.imag(), ratio.imag(), ratio.real();
        const Eigen::Matrix2d blocks[3] = {Eigen::Matrix2d::Identity(), mr - Eigen::Matrix2d::Identity(), -mr};
        const int verts[3] = {v0, v1, v2};
        for (int k = 0; k < 3; ++k) {
          const int col = sys_.column[static_cast<std::size_t>(verts[k])];
          if (col < 0) continue;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              if (blocks[k](a, b) != 0.0) tp->emplace_back(row0 + a, col + b, ss * blocks[k](a, b));
        }
      }
    }

    residuals = Eigen::Map<const Eigen::VectorXd>(res.data(), static_cast<Eigen::Index>(res.size()));
    if (jacobian) {
      jacobian->resize(static_cast<Eigen::Index>(res.size()), sys_.unknowns);
      jacobian->setFromTriplets(trip.begin(), trip.end());
    }
    return true;
  }

  static constexpr double kSmooth = 1e-6;

 private:
  WarpGrid grid_;
  GridRegion region_;
  GridWeights weights_;
  LinearSystem sys_;
  std::vector<Triangle> tris_;
};

GridRegion full_region(const WarpGrid& grid) { return {0, grid.rows - 1, 0, grid.cols - 1}; }

Vec2 bilinear_point(const Vec2& p00, const Vec2& p01, const Vec2& p10, const Vec2& p11, double s, double t) {
  return (1 - s) * (1 - t) * p00 + s * (1 - t) * p01 + (1 - s) * t * p10 + s * t * p11;
}

void sample_bilinear(const cv::Mat& img, double x, double y, uchar* out) {
  const int ch = img.channels();
  x = std::clamp(x, 0.0, static_cast<double>(img.cols - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.rows - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.cols - 1), y1 = std::min(y0 + 1, img.rows - 1);
  const double fx = x - x0, fy = y - y0;
  const uchar* a = img.ptr<uchar>(y0) + x0 * ch;
  const uchar* b = img.ptr<uchar>(y0) + x1 * ch;
  const uchar* c = img.ptr<uchar>(y1) + x0 * ch;
  const uchar* d = img.ptr<uchar>(y1) + x1 * ch;
  for (int k = 0; k < ch; ++k) {
    const double v = (1 - fx) * (1 - fy) * a[k] + fx * (1 - fy) * b[k] + (1 - fx) * fy * c[k] + fx * fy * d[k];
    out[k] = static_cast<uchar>(std::clamp(std::lround(v), 0L, 255L));
  }
}

WarpGrid mls_grid(const WarpGrid& grid, const GridRegion& region, const std::vector<ControlConstraint>& constraints,
                  const std::vector<Vec2>& p, const std::vector<Vec2>& q, MlsKind kind) {
  WarpGrid out = grid;
  for (int r = region.r0 + 1; r < region.r1; ++r)
    for (int c = region.c0 + 1; c < region.c1; ++c) {
      const int i = grid.index(r, c);
      out.positions[static_cast<std::size_t>(i)] = mls_deform(p, q, grid.rest[static_cast<std::size_t>(i)], kind);
    }
  return mark_region(out, constraints, region);
}

std::vector<Vec2> valid_sources(const DenseContourMapping& mapping, bool target) {
  std::vector<Vec2> out;
  for (const auto& pr : mapping.pairs)
    if (pr.valid) out.push_back(target ? pr.target : pr.source);
  return out;
}

}  // namespace

// --- Grid ----------------------------------------------------------------------

WarpGrid WarpGrid::uniform(int rows, int cols, int width, int height) {
  if (rows < 2 || cols < 2) throw ArgumentError("warp grid needs at least 2 rows and 2 columns");
  if (width < 2 || height < 2) throw ArgumentError("warp grid needs an image of at least 2x2 pixels");
  WarpGrid g;
  g.rows = rows;
  g.cols = cols;
  const double sx = static_cast<double>(width - 1) / (cols - 1);
  const double sy = static_cast<double>(height - 1) / (rows - 1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) g.rest.emplace_back(c * sx, r * sy);
  g.positions = g.rest;
  g.flags.assign(g.rest.size(), GridFlag::Free);
  return g;
}

Vec2 WarpGrid::spacing() const { return rest[static_cast<std::size_t>(index(1, 1))] - rest[0]; }

Vec2 WarpGrid::map(const Vec2& p) const {
  const Vec2 sp = spacing();
  const double u = p.x() / sp.x(), v = p.y() / sp.y();
  const int c = std::clamp(static_cast<int>(std::floor(u)), 0, cols - 2);
  const int r = std::clamp(static_cast<int>(std::floor(v)), 0, rows - 2);
  const double s = u - c, t = v - r;
  return bilinear_point(positions[static_cast<std::size_t>(index(r, c))], positions[static_cast<std::size_t>(index(r, c + 1))],
                        positions[static_cast<std::size_t>(index(r + 1, c))],
                        positions[static_cast<std::size_t>(index(r + 1, c + 1))], s, t);
}

GridRegion optimization_region(const WarpGrid& grid, const std::vector<Vec2>& a, const std::vector<Vec2>& b, int width,
                               int height, double scale) {
  if (a.empty() && b.empty()) throw ArgumentError("optimization region: no points");
  Vec2 lo = a.empty() ? b.front() : a.front();
  Vec2 hi = lo;
  for (const auto* set : {&a, &b})
    for (const auto& p : *set) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  const Vec2 center = 0.5 * (lo + hi);
  const Vec2 half = 0.5 * scale * (hi - lo);
  lo = (center - half).cwiseMax(Vec2::Zero());
  hi = (center + half).cwiseMin(Vec2(width - 1, height - 1));
  const Vec2 sp = grid.spacing();
  GridRegion region;
  region.c0 = std::clamp(static_cast<int>(std::floor(lo.x() / sp.x())), 0, grid.cols - 1);
  region.c1 = std::clamp(static_cast<int>(std::ceil(hi.x() / sp.x())), 0, grid.cols - 1);
  region.r0 = std::clamp(static_cast<int>(std::floor(lo.y() / sp.y())), 0, grid.rows - 1);
  region.r1 = std::clamp(static_cast<int>(std::ceil(hi.y() / sp.y())), 0, grid.rows - 1);
  return region;
}

std::vector<int> select_control_points(const WarpGrid& grid, const std::vector<Vec2>& silhouette) {
  const Vec2 sp = grid.spacing();
  std::vector<int> out;
  for (const auto& p : silhouette) {
    const int c = std::clamp(static_cast<int>(std::lround(p.x() / sp.x())), 0, grid.cols - 1);
    const int r = std::clamp(static_cast<int>(std::lround(p.y() / sp.y())), 0, grid.rows - 1);
    out.push_back(grid.index(r, c));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// --- MLS -------------------------------------------------------------------------

Vec2 mls_deform(const std::vector<Vec2>& p, const std::vector<Vec2>& q, const Vec2& v, MlsKind kind, double eps) {
  if (p.size() != q.size() || p.empty()) throw ArgumentError("mls: handle lists must be non-empty and equal length");
  std::vector<double> w(p.size());
  double wsum = 0.0;
  Vec2 ps = Vec2::Zero(), qs = Vec2::Zero();
  for (std::size_t i = 0; i < p.size(); ++i) {
    w[i] = 1.0 / ((p[i] - v).squaredNorm() + eps);
    wsum += w[i];
    ps += w[i] * p[i];
    qs += w[i] * q[i];
  }
  ps /= wsum;
  qs /= wsum;

  if (kind == MlsKind::Similarity) {
    Complex num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Complex ph = to_complex(p[i] - ps);
      const Complex qh = to_complex(q[i] - qs);
      num += w[i] * std::conj(ph) * qh;
      den += w[i] * std::norm(ph);
    }
    if (den <= 0.0) return v - ps + qs;
    return to_vec(num / den * to_complex(v - ps)) + qs;
  }

  Eigen::Matrix2d pp = Eigen::Matrix2d::Zero(), pq = Eigen::Matrix2d::Zero();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Vec2 ph = p[i] - ps, qh = q[i] - qs;
    pp += w[i] * ph * ph.transpose();
    pq += w[i] * ph * qh.transpose();
  }
  if (std::abs(pp.determinant()) < 1e-12) return v - ps + qs;
  const Eigen::Matrix2d m = pp.inverse() * pq;
  return m.transpose() * (v - ps) + qs;
}

std::vector<ControlConstraint> mls_targets(const WarpGrid& grid, const std::vector<int>& controls,
                                           const std::vector<Vec2>& sources, const std::vector<Vec2>& targets,
                                           MlsKind kind) {
  if (sources.size() != targets.size()) throw ArgumentError("mls: source and target counts differ");
  if (sources.size() < 3) throw WarpError("mls: need at least 3 valid handles, got " + std::to_string(sources.size()));
  std::vector<ControlConstraint> out;
  out.reserve(controls.size());
  for (int idx : controls) out.push_back({idx, mls_deform(sources, targets, grid.rest[static_cast<std::size_t>(idx)], kind)});
  return out;
}

std::vector<ControlConstraint> mls_targets(const WarpGrid& grid, const std::vector<int>& controls,
                                           const DenseContourMapping& mapping, MlsKind kind) {
  return mls_targets(grid, controls, valid_sources(mapping, false), valid_sources(mapping, true), kind);
}

// --- Grid optimization ---------------------------------------------------------------

double grid_energy(const WarpGrid& grid, const GridRegion& region, const GridWeights& weights) {
  double e = 0.0;
  for_each_edge(grid, region, [&](int i, int j) {
    const Vec2 d = grid.positions[static_cast<std::size_t>(i)] - grid.positions[static_cast<std::size_t>(j)];
    const Vec2 rest = (grid.rest[static_cast<std::size_t>(i)] - grid.rest[static_cast<std::size_t>(j)]).normalized();
    const double c = cross(d, rest);
    e += 2.0 * (weights.w_l * c * c + weights.w_r * d.squaredNorm());
  });
  return e;
}

WarpGrid optimize_grid(const WarpGrid& grid, const std::vector<ControlConstraint>& constraints, const GridRegion& region,
                       const GridWeights& weights) {
  WarpGrid out = mark_region(grid, constraints, region);
  const LinearSystem sys = free_columns(out);
  if (sys.unknowns == 0) return out;

  // Residuals are affine in the unknowns: r(x) = A x + r(0).
  std::vector<double> r0;
  Triplets trip;
  const std::vector<Vec2> zero_pos = lattice_positions(out, sys, Eigen::VectorXd::Zero(sys.unknowns));
  bending_rows(out, region, weights, sys, zero_pos, r0, &trip);
  SparseMatrix a(static_cast<Eigen::Index>(r0.size()), sys.unknowns);
  a.setFromTriplets(trip.begin(), trip.end());
  const Eigen::VectorXd b = -Eigen::Map<const Eigen::VectorXd>(r0.data(), static_cast<Eigen::Index>(r0.size()));
  const SparseMatrix normal = SparseMatrix(a.transpose()) * a;
  const Eigen::VectorXd rhs = a.transpose() * b;

  Eigen::SimplicialLDLT<SparseMatrix> ldlt(normal);
  if (ldlt.info() != Eigen::Success) return out;
  Eigen::VectorXd x = ldlt.solve(rhs);
  // Refinement keeps the normal-equation residual near round-off.
  for (int it = 0; it < 2; ++it) {
    const Eigen::VectorXd res = rhs - normal * x;
    if (res.norm() <= 1e-12 * std::max(rhs.norm(), 1.0)) break;
    x += ldlt.solve(res);
  }
  out.positions = lattice_positions(out, sys, x);
  return out;
}

// --- Sparse mode -----------------------------------------------------------------------

SparseModeEnergies sparse_mode_energies(const WarpGrid& grid, const GridRegion& region) {
  SparseModeEnergies out;
  for (const auto& t : region_triangles(grid, region)) {
    if (degenerate(grid, t)) {
      ++out.degenerate_triangles;
      continue;
    }
    out.e_d += distortion(svd_terms(deformation(grid, t, grid.positions), 0.0));
    for (int rot = 0; rot < 3; ++rot) {
      const int v0 = t.v[rot], v1 = t.v[(rot + 1) % 3], v2 = t.v[(rot + 2) % 3];
      const Complex ratio = similarity_ratio(grid, v0, v1, v2);
      const Complex r = (to_complex(grid.positions[static_cast<std::size_t>(v0)]) - to_complex(grid.positions[static_cast<std::size_t>(v1)])) -
                        ratio * (to_complex(grid.positions[static_cast<std::size_t>(v2)]) - to_complex(grid.positions[static_cast<std::size_t>(v1)]));
      out.e_s += std::norm(r);
    }
  }
  return out;
}

SparseModeEnergies sparse_mode_energies(const WarpGrid& grid) { return sparse_mode_energies(grid, full_region(grid)); }

double sparse_mode_total_energy(const WarpGrid& grid, const GridRegion& region, const GridWeights& weights) {
  const SparseModeEnergies e = sparse_mode_energies(grid, region);
  return grid_energy(grid, region, weights) + weights.w_d * e.e_d + weights.w_s * e.e_s;
}

std::unique_ptr<LeastSquaresProblem> sparse_mode_problem(const WarpGrid& marked, const GridRegion& region,
                                                         const GridWeights& weights) {
  return std::make_unique<SparseModeProblem>(marked, region, weights);
}

Eigen::VectorXd free_point_vector(const WarpGrid& marked) { return pack_free(marked, free_columns(marked)); }

SparseModeResult optimize_grid_sparse_mode(const WarpGrid& grid, const std::vector<ControlConstraint>& constraints,
                                           const GridRegion& region, const GridWeights& weights,
                                           const SolverOptions& solver) {
  SparseModeResult out;
  out.step1 = optimize_grid(grid, constraints, region, weights);
  out.grid = out.step1;
  const SparseModeProblem problem(out.step1, region, weights);
  if (problem.parameter_count() == 0) {
    out.step1_energy = out.final_energy = sparse_mode_total_energy(out.step1, region, weights);
    return out;
  }
  Eigen::VectorXd x = pack_free(out.step1, problem.system());
  out.summary = solve_least_squares(problem, x, solver);
  out.grid.positions = lattice_positions(out.step1, problem.system(), x);
  // the solver drops edges between fixed points, which only shifts its energy
  out.step1_energy = sparse_mode_total_energy(out.step1, region, weights);
  out.final_energy = sparse_mode_total_energy(out.grid, region, weights);
  return out;
}

// --- Resampling --------------------------------------------------------------------------

cv::Mat warp_image(const cv::Mat& image, const WarpGrid& grid, WarpStats* stats) {
  if (image.empty() || image.depth() != CV_8U) throw ArgumentError("warp_image: expected an 8-bit image");
  cv::Mat out = image.clone();
  WarpStats st;
  const int ch = image.channels();
  // Sub-micropixel corner motion counts as no motion.
  constexpr double kStill = 1e-6;
  for (int r = 0; r + 1 < grid.rows; ++r)
    for (int c = 0; c + 1 < grid.cols; ++c) {
      const int ids[4] = {grid.index(r, c), grid.index(r, c + 1), grid.index(r + 1, c), grid.index(r + 1, c + 1)};
      double moved = 0.0;
      for (int id : ids)
        moved = std::max(moved, (grid.positions[static_cast<std::size_t>(id)] - grid.rest[static_cast<std::size_t>(id)]).norm());
      if (moved < kStill) continue;
      ++st.deformed_cells;
      const Vec2& p00 = grid.positions[static_cast<std::size_t>(ids[0])];
      const Vec2& p01 = grid.positions[static_cast<std::size_t>(ids[1])];
      const Vec2& p10 = grid.positions[static_cast<std::size_t>(ids[2])];
      const Vec2& p11 = grid.positions[static_cast<std::size_t>(ids[3])];
      const Vec2& rest00 = grid.rest[static_cast<std::size_t>(ids[0])];
      const Vec2 span = grid.rest[static_cast<std::size_t>(ids[3])] - rest00;

      auto jac = [&](double s, double t) {
        Eigen::Matrix2d j;
        j.col(0) = (1 - t) * (p01 - p00) + t * (p11 - p10);
        j.col(1) = (1 - s) * (p10 - p00) + s * (p11 - p01);
        return j;
      };
      bool folded = false;
      for (double s : {0.0, 1.0})
        for (double t : {0.0, 1.0})
          if (jac(s, t).determinant() <= 0.0) folded = true;
      if (folded) ++st.folded_cells;

      const Vec2 lo = p00.cwiseMin(p01).cwiseMin(p10).cwiseMin(p11);
      const Vec2 hi = p00.cwiseMax(p01).cwiseMax(p10).cwiseMax(p11);
      const int x0 = std::max(0, static_cast<int>(std::ceil(lo.x() - 1e-9)));
      const int x1 = std::min(image.cols - 1, static_cast<int>(std::floor(hi.x() + 1e-9)));
      const int y0 = std::max(0, static_cast<int>(std::ceil(lo.y() - 1e-9)));
      const int y1 = std::min(image.rows - 1, static_cast<int>(std::floor(hi.y() + 1e-9)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const Vec2 o(x, y);
          double s = 0.5, t = 0.5;
          bool ok = false;
          for (int it = 0; it < 20; ++it) {
            const Vec2 f = bilinear_point(p00, p01, p10, p11, s, t) - o;
            if (f.norm() < 1e-9) {
              ok = true;
              break;
            }
            const Eigen::Matrix2d j = jac(s, t);
            const double det = j.determinant();
            if (std::abs(det) < 1e-14) break;
            const Vec2 step = j.inverse() * f;
            s -= step.x();
            t -= step.y();
            if (folded) {
              // Stay on the nearest valid part of the cell.
              s = std::clamp(s, 0.0, 1.0);
              t = std::clamp(t, 0.0, 1.0);
            }
          }
          constexpr double kEdge = 1e-9;
          if (!ok || s < -kEdge || s > 1 + kEdge || t < -kEdge || t > 1 + kEdge) continue;
          const Vec2 src = rest00 + Vec2(s * span.x(), t * span.y());
          sample_bilinear(image, src.x(), src.y(), out.ptr<uchar>(y) + x * ch);
        }
    }
  if (stats) *stats = st;
  return out;
}

// --- Planning ------------------------------------------------------------------------------

WarpPlan plan_warp(const Silhouette& original, const Silhouette& reshaped, const DenseContourMapping& mapping, int width,
                   int height, const WarpOptions& options) {
  const WarpGrid grid = WarpGrid::uniform(options.rows, options.cols, width, height);
  WarpPlan plan;
  plan.region = optimization_region(grid, original.points, reshaped.points, width, height, options.region_scale);
  for (int idx : select_control_points(grid, original.points))
    if (plan.region.contains(idx / grid.cols, idx % grid.cols) && !plan.region.on_rim(idx / grid.cols, idx % grid.cols))
      plan.controls.push_back(idx);
  const std::vector<Vec2> p = valid_sources(mapping, false), q = valid_sources(mapping, true);
  plan.constraints = mls_targets(grid, plan.controls, p, q, options.mls);
  plan.mls = mls_grid(grid, plan.region, plan.constraints, p, q, options.mls);
  plan.mls_energy = grid_energy(plan.mls, plan.region, options.weights);
  plan.optimized = optimize_grid(plan.mls, plan.constraints, plan.region, options.weights);
  plan.optimized_energy = grid_energy(plan.optimized, plan.region, options.weights);
  return plan;
}

WarpPlan plan_warp_sparse(const Silhouette& original, const Silhouette& reshaped, const std::vector<Vec2>& sources,
                          const std::vector<Vec2>& targets, int width, int height, const WarpOptions& options) {
  const WarpGrid grid = WarpGrid::uniform(options.rows, options.cols, width, height);
  WarpPlan plan;
  plan.region = optimization_region(grid, original.points, reshaped.points, width, height, options.region_scale);
  for (int idx : select_control_points(grid, sources))
    if (plan.region.contains(idx / grid.cols, idx % grid.cols) && !plan.region.on_rim(idx / grid.cols, idx % grid.cols))
      plan.controls.push_back(idx);
  plan.constraints = mls_targets(grid, plan.controls, sources, targets, options.mls);
  plan.mls = mls_grid(grid, plan.region, plan.constraints, sources, targets, options.mls);
  plan.mls_energy = sparse_mode_total_energy(plan.mls, plan.region, options.weights);
  const SparseModeResult res = optimize_grid_sparse_mode(plan.mls, plan.constraints, plan.region, options.weights);
  plan.optimized = res.grid;
  plan.optimized_energy = sparse_mode_total_energy(plan.optimized, plan.region, options.weights);
  return plan;
}

ContourGap contour_gap(const WarpGrid& grid, const std::vector<Vec2>& original, const Silhouette& reshaped) {
  const ContourDistance target(reshaped.closed_polyline());
  ContourGap gap;
  for (const auto& p : original) {
    const double d = target.distance(grid.map(p));
    gap.max = std::max(gap.max, d);
    gap.mean += d;
  }
  if (!original.empty()) gap.mean /= static_cast<double>(original.size());
  return gap;
}

}  // namespace preshape
