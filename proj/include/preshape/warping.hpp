#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <opencv2/core.hpp>

#include "preshape/contour_sdf.hpp"
#include "preshape/face_model.hpp"
#include "preshape/solver.hpp"

namespace preshape {

enum class GridFlag : std::uint8_t { Free = 0, Control = 1, Fixed = 2 };

// rows x cols lattice spanning the image; rest positions are uniform.
struct WarpGrid {
  int rows = 0;
  int cols = 0;
  std::vector<Vec2> rest;
  std::vector<Vec2> positions;
  std::vector<GridFlag> flags;

  // Lattice with corners on pixel centers (0, 0) and (width-1, height-1).
  static WarpGrid uniform(int rows, int cols, int width, int height);

  int index(int r, int c) const { return r * cols + c; }
  int size() const { return rows * cols; }
  Vec2 spacing() const;
  // Forward map of a rest-space point through the piecewise-bilinear deformation.
  Vec2 map(const Vec2& p) const;
};

struct ControlConstraint {
  int index = -1;
  Vec2 target = Vec2::Zero();
};

// Inclusive lattice rectangle; its outermost rows and columns stay fixed.
struct GridRegion {
  int r0 = 0, r1 = 0, c0 = 0, c1 = 0;

  bool contains(int r, int c) const { return r >= r0 && r <= r1 && c >= c0 && c <= c1; }
  bool on_rim(int r, int c) const { return contains(r, c) && (r == r0 || r == r1 || c == c0 || c == c1); }
};

// Bounding box of both point sets, scaled about its center, clamped to the
// image and snapped outward to grid lines.
GridRegion optimization_region(const WarpGrid& grid, const std::vector<Vec2>& a, const std::vector<Vec2>& b,
                               int width, int height, double scale = 1.8);

// The lattice point nearest to each silhouette pixel, deduplicated, ascending.
std::vector<int> select_control_points(const WarpGrid& grid, const std::vector<Vec2>& silhouette);

enum class MlsKind { Similarity, Affine };

// Moving-least-squares deformation of v by handles p -> q with weights
// 1 / (|p - v|^2 + eps).
Vec2 mls_deform(const std::vector<Vec2>& p, const std::vector<Vec2>& q, const Vec2& v,
                MlsKind kind = MlsKind::Similarity, double eps = 1e-6);

// Valid mapping pairs are the handles. Throws WarpError for fewer than 3.
std::vector<ControlConstraint> mls_targets(const WarpGrid& grid, const std::vector<int>& controls,
                                           const DenseContourMapping& mapping, MlsKind kind = MlsKind::Similarity);
std::vector<ControlConstraint> mls_targets(const WarpGrid& grid, const std::vector<int>& controls,
                                           const std::vector<Vec2>& sources, const std::vector<Vec2>& targets,
                                           MlsKind kind = MlsKind::Similarity);

struct GridWeights {
  double w_l = 1.0;
  double w_r = 0.8;
  double w_d = 0.5;
  double w_s = 0.5;
};

// w_l E_l + w_r E_r over region edges, each directed 4-neighbour pair counted.
double grid_energy(const WarpGrid& grid, const GridRegion& region, const GridWeights& weights = {});

// Marks controls and the region rim, then solves the linear least squares for
// the remaining region points. Points outside the region keep their rest
// position. If nothing is free the input comes back with only the flags updated.
WarpGrid optimize_grid(const WarpGrid& grid, const std::vector<ControlConstraint>& constraints,
                       const GridRegion& region, const GridWeights& weights = {});

struct SparseModeEnergies {
  double e_d = 0.0;
  double e_s = 0.0;
  int degenerate_triangles = 0;
};

// Each region cell is split along its (r, c)-(r+1, c+1) diagonal.
SparseModeEnergies sparse_mode_energies(const WarpGrid& grid, const GridRegion& region);
SparseModeEnergies sparse_mode_energies(const WarpGrid& grid);

// Step-2 objective over the Free points of a grid already flagged by
// optimize_grid; x holds those points in index order.
std::unique_ptr<LeastSquaresProblem> sparse_mode_problem(const WarpGrid& marked, const GridRegion& region,
                                                         const GridWeights& weights = {});
Eigen::VectorXd free_point_vector(const WarpGrid& marked);

struct SparseModeResult {
  WarpGrid step1;
  WarpGrid grid;
  double step1_energy = 0.0;  // four-term energy at the step-1 grid
  double final_energy = 0.0;
  SolverSummary summary;
};

// Step 1 is optimize_grid; step 2 adds w_d E_d + w_s E_s and runs the damped
// solver from there.
SparseModeResult optimize_grid_sparse_mode(const WarpGrid& grid, const std::vector<ControlConstraint>& constraints,
                                           const GridRegion& region, const GridWeights& weights = {},
                                           const SolverOptions& solver = {});

// w_l E_l + w_r E_r + w_d E_d + w_s E_s.
double sparse_mode_total_energy(const WarpGrid& grid, const GridRegion& region, const GridWeights& weights = {});

struct WarpStats {
  int deformed_cells = 0;
  int folded_cells = 0;
};

// Output pixels inside a deformed cell are found by inverse bilinear lookup
// and sampled bilinearly from the source; everything else is copied.
cv::Mat warp_image(const cv::Mat& image, const WarpGrid& grid, WarpStats* stats = nullptr);

struct WarpOptions {
  int rows = 100;
  int cols = 100;
  GridWeights weights;
  MlsKind mls = MlsKind::Similarity;
  double region_scale = 1.8;
  bool sparse_mode = false;
};

struct WarpPlan {
  GridRegion region;
  std::vector<int> controls;
  std::vector<ControlConstraint> constraints;
  WarpGrid mls;        // MLS applied to every region point
  WarpGrid optimized;
  double mls_energy = 0.0;
  double optimized_energy = 0.0;
};

// Controls come from the original silhouette and the handles are the valid
// dense mapping pairs.
WarpPlan plan_warp(const Silhouette& original, const Silhouette& reshaped, const DenseContourMapping& mapping,
                   int width, int height, const WarpOptions& options = {});

// Sparse baseline: controls are the lattice points nearest to the given
// handles only.
WarpPlan plan_warp_sparse(const Silhouette& original, const Silhouette& reshaped, const std::vector<Vec2>& sources,
                          const std::vector<Vec2>& targets, int width, int height, const WarpOptions& options = {});

struct ContourGap {
  double max = 0.0;
  double mean = 0.0;
};

// Distance from each forward-mapped original contour point to the reshaped contour.
ContourGap contour_gap(const WarpGrid& grid, const std::vector<Vec2>& original, const Silhouette& reshaped);

}  // namespace preshape
