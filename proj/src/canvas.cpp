#include "einmemo/canvas.hpp"

#include <string>

#include "einmemo/errors.hpp"

namespace einmemo {

std::string_view to_string(Cell c) {
  switch (c) {
    case Cell::tl: return "tl";
    case Cell::tr: return "tr";
    case Cell::bl: return "bl";
    case Cell::br: return "br";
  }
  return "?";
}

Cell parse_cell(std::string_view name) {
  for (Cell c : kAllCells) {
    if (to_string(c) == name) return c;
  }
  throw UsageError("unknown cell '" + std::string(name) + "' (expected tl, tr, bl or br)");
}

void CanvasSpec::validate() const {
  if (cell_h <= 0 || cell_w <= 0) throw UsageError("cell size must be positive");
  if (gap < 0 || gap % 2 != 0) throw UsageError("canvas gap must be a non-negative even number");
}

Rect CanvasSpec::cell_rect(Cell c) const {
  const bool bottom = c == Cell::bl || c == Cell::br;
  const bool right = c == Cell::tr || c == Cell::br;
  return Rect{bottom ? cell_h + gap : 0, right ? cell_w + gap : 0, cell_h, cell_w};
}

Rect CanvasSpec::quadrant(Cell c) const {
  const bool bottom = c == Cell::bl || c == Cell::br;
  const bool right = c == Cell::tr || c == Cell::br;
  const int qh = cell_h + gap / 2, qw = cell_w + gap / 2;
  return Rect{bottom ? qh : 0, right ? qw : 0, qh, qw};
}

namespace {

void check_cell_image(const Image& img, const CanvasSpec& spec, const char* what) {
  if (img.channels() != 3 || img.height() != spec.cell_h || img.width() != spec.cell_w) {
    throw UsageError(std::string(what) + " must be 3 x " + std::to_string(spec.cell_h) + " x " +
                     std::to_string(spec.cell_w));
  }
}

Canvas compose(const Image& a, const Image& b, const Image& q, const Image* q_label,
               const CanvasSpec& spec) {
  spec.validate();
  check_cell_image(a, spec, "in-context image");
  check_cell_image(b, spec, "in-context label");
  check_cell_image(q, spec, "query image");
  if (q_label) check_cell_image(*q_label, spec, "query label");
  Canvas c{Image(3, spec.canvas_h(), spec.canvas_w(), spec.fill), spec,
           q_label ? CanvasKind::ground_truth : CanvasKind::query};
  const auto put = [&](const Image& img, Cell cell) {
    const Rect r = spec.cell_rect(cell);
    c.pixels.paste(img, r.top, r.left);
  };
  put(a, Cell::tl);
  put(b, Cell::tr);
  put(q, Cell::bl);
  if (q_label) put(*q_label, Cell::br);
  return c;
}

}  // namespace

Canvas compose_canvas(const Image& pair_image, const Image& pair_label, const Image& query,
                      const CanvasSpec& spec) {
  return compose(pair_image, pair_label, query, nullptr, spec);
}

Canvas compose_gt_canvas(const Image& pair_image, const Image& pair_label, const Image& query,
                         const Image& query_label, const CanvasSpec& spec) {
  return compose(pair_image, pair_label, query, &query_label, spec);
}

Image extract_cell(const Canvas& canvas, Cell cell) {
  return canvas.pixels.crop(canvas.spec.cell_rect(cell));
}

Image extract_cell(const Canvas& canvas, std::string_view cell_name) {
  return extract_cell(canvas, parse_cell(cell_name));
}

std::vector<int> cell_token_indices(const CanvasSpec& spec, int side, Cell cell) {
  spec.validate();
  if (side <= 0) throw UsageError("token grid side must be positive");
  if (spec.canvas_h() != spec.canvas_w()) {
    throw UsageError("square token grid requested for a non-square canvas");
  }
  if (spec.canvas_h() % side != 0) {
    throw UsageError("token grid side " + std::to_string(side) + " does not divide canvas size " +
                     std::to_string(spec.canvas_h()));
  }
  const int patch = spec.canvas_h() / side;
  const Rect r = spec.cell_rect(cell);
  std::vector<int> out;
  for (int row = 0; row < side; ++row) {
    for (int col = 0; col < side; ++col) {
      // Pixel i spans [i, i + 1); a patch center is at (k + 1/2) * patch. Compare doubled.
      const int cy2 = (2 * row + 1) * patch, cx2 = (2 * col + 1) * patch;
      if (cy2 >= 2 * r.top && cy2 < 2 * r.bottom() && cx2 >= 2 * r.left && cx2 < 2 * r.right()) {
        out.push_back(row * side + col);
      }
    }
  }
  return out;
}

std::vector<int> masked_token_indices(const CanvasSpec& spec, int side) {
  return cell_token_indices(spec, side, Cell::br);
}

}  // namespace einmemo
