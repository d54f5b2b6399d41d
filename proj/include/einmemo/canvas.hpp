#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "einmemo/image.hpp"

namespace einmemo {

// Fixed 2x2 layout: in-context image, in-context label / query, output region.
enum class Cell { tl, tr, bl, br };

inline constexpr std::array<Cell, 4> kAllCells = {Cell::tl, Cell::tr, Cell::bl, Cell::br};

std::string_view to_string(Cell c);
Cell parse_cell(std::string_view name);

struct CanvasSpec {
  int cell_h = 111;
  int cell_w = 111;
  int gap = 2;        // even; half on each side of the seam
  double fill = 0.0;  // gap pixels and the empty output region

  int canvas_h() const { return 2 * cell_h + gap; }
  int canvas_w() const { return 2 * cell_w + gap; }
  Rect cell_rect(Cell c) const;
  // The cell plus its half of the adjoining gaps; quadrants tile the canvas.
  Rect quadrant(Cell c) const;
  void validate() const;

  friend bool operator==(const CanvasSpec&, const CanvasSpec&) = default;
};

enum class CanvasKind { query, ground_truth };

struct Canvas {
  Image pixels;  // 3 x canvas_h x canvas_w
  CanvasSpec spec;
  CanvasKind kind = CanvasKind::query;

  Rect region(Cell c) const { return spec.cell_rect(c); }
};

// [pair_image, pair_label; query, empty]
Canvas compose_canvas(const Image& pair_image, const Image& pair_label, const Image& query,
                      const CanvasSpec& spec);
// [pair_image, pair_label; query, query_label]
Canvas compose_gt_canvas(const Image& pair_image, const Image& pair_label, const Image& query,
                         const Image& query_label, const CanvasSpec& spec);

Image extract_cell(const Canvas& canvas, Cell cell);
Image extract_cell(const Canvas& canvas, std::string_view cell_name);

// Row-major token positions whose patch centers lie inside the given cell,
// for a side x side token grid laid over the (square) canvas.
std::vector<int> cell_token_indices(const CanvasSpec& spec, int token_grid_side, Cell cell);
// Positions of the output region (bottom-right cell).
std::vector<int> masked_token_indices(const CanvasSpec& spec, int token_grid_side);

}  // namespace einmemo
