#include <gtest/gtest.h>

#include <set>

#include "einmemo/canvas.hpp"
#include "einmemo/errors.hpp"
#include "test_support.hpp"

using namespace einmemo;

namespace {

struct Triple {
  Image a, b, q, ql;
};

Triple random_triple(const CanvasSpec& spec, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {testkit::random_image(rng, 3, spec.cell_h, spec.cell_w), testkit::random_image(rng, 3, spec.cell_h, spec.cell_w),
          testkit::random_image(rng, 3, spec.cell_h, spec.cell_w), testkit::random_image(rng, 3, spec.cell_h, spec.cell_w)};
}

// Positions whose patch centers fall in the rectangle, enumerated directly.
std::vector<int> centers_inside(const Rect& r, int canvas, int side) {
  const double patch = static_cast<double>(canvas) / side;
  std::vector<int> out;
  for (int row = 0; row < side; ++row) {
    for (int col = 0; col < side; ++col) {
      const double cy = (row + 0.5) * patch, cx = (col + 0.5) * patch;
      if (cy >= r.top && cy < r.bottom() && cx >= r.left && cx < r.right()) out.push_back(row * side + col);
    }
  }
  return out;
}

}  // namespace

TEST(CanvasSpec, Dimensions) {
  const CanvasSpec s;
  EXPECT_EQ(s.canvas_h(), 224);
  EXPECT_EQ(s.canvas_w(), 224);
  const CanvasSpec small{55, 55, 2, 0.0};
  EXPECT_EQ(small.canvas_h(), 112);
  EXPECT_EQ(small.canvas_w(), 112);
  EXPECT_THROW((CanvasSpec{111, 111, 3, 0.0}.validate()), UsageError);
}

TEST(CanvasSpec, CellRectangles) {
  const CanvasSpec s;
  EXPECT_EQ(s.cell_rect(Cell::tl), (Rect{0, 0, 111, 111}));
  EXPECT_EQ(s.cell_rect(Cell::tr), (Rect{0, 113, 111, 111}));
  EXPECT_EQ(s.cell_rect(Cell::bl), (Rect{113, 0, 111, 111}));
  EXPECT_EQ(s.cell_rect(Cell::br), (Rect{113, 113, 111, 111}));
  for (Cell a : kAllCells)
    for (Cell b : kAllCells)
      if (a != b) EXPECT_FALSE(s.cell_rect(a).intersects(s.cell_rect(b)));
}

TEST(CanvasSpec, QuadrantsTileCanvas) {
  const CanvasSpec s;
  std::vector<int> cover(224 * 224, 0);
  for (Cell c : kAllCells) {
    const Rect q = s.quadrant(c);
    EXPECT_EQ(q.height, 112);
    EXPECT_EQ(q.width, 112);
    for (int y = q.top; y < q.bottom(); ++y)
      for (int x = q.left; x < q.right(); ++x) ++cover[y * 224 + x];
  }
  for (int v : cover) EXPECT_EQ(v, 1);
}

TEST(Canvas, ComposeExtractRoundTrip) {
  const CanvasSpec spec;
  const Triple t = random_triple(spec, 1);
  const Canvas c = compose_canvas(t.a, t.b, t.q, spec);
  EXPECT_EQ(c.kind, CanvasKind::query);
  EXPECT_EQ(c.pixels.height(), 224);
  EXPECT_EQ(extract_cell(c, Cell::tl), t.a);
  EXPECT_EQ(extract_cell(c, Cell::tr), t.b);
  EXPECT_EQ(extract_cell(c, "bl"), t.q);
  EXPECT_EQ(extract_cell(c, Cell::br), Image(3, 111, 111, spec.fill));
  EXPECT_THROW(extract_cell(c, "middle"), UsageError);
}

TEST(Canvas, QueryPlacedAtBottomLeftRows) {
  const CanvasSpec spec;
  const Image zero(3, 111, 111, 0.0), one(3, 111, 111, 1.0);
  const Canvas c = compose_canvas(zero, zero, one, spec);
  for (int y = 0; y < 224; ++y) {
    for (int x = 0; x < 224; ++x) {
      const bool in_query = y >= 113 && y < 224 && x < 111;
      EXPECT_EQ(c.pixels.at(1, y, x), in_query ? 1.0 : 0.0) << y << "," << x;
    }
  }
}

TEST(Canvas, GapPixelsCarryFill) {
  const CanvasSpec spec{111, 111, 2, 0.3};
  const Image one(3, 111, 111, 1.0);
  const Canvas c = compose_gt_canvas(one, one, one, one, spec);
  for (int y = 0; y < 224; ++y) {
    for (int x = 0; x < 224; ++x) {
      bool in_cell = false;
      for (Cell cell : kAllCells) in_cell = in_cell || spec.cell_rect(cell).contains(y, x);
      EXPECT_EQ(c.pixels.at(0, y, x), in_cell ? 1.0 : 0.3);
    }
  }
}

TEST(Canvas, GtDiffersOnlyInBottomRight) {
  const CanvasSpec spec;
  const Triple t = random_triple(spec, 2);
  const Canvas q = compose_canvas(t.a, t.b, t.q, spec);
  const Canvas g = compose_gt_canvas(t.a, t.b, t.q, t.ql, spec);
  EXPECT_EQ(g.kind, CanvasKind::ground_truth);
  EXPECT_EQ(extract_cell(g, Cell::br), t.ql);
  const Rect br = spec.cell_rect(Cell::br);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 224; ++y)
      for (int x = 0; x < 224; ++x)
        if (!br.contains(y, x)) EXPECT_EQ(q.pixels.at(ch, y, x), g.pixels.at(ch, y, x));
}

TEST(Canvas, AllZeroInputsGiveFillPattern) {
  const CanvasSpec spec;
  const Image zero(3, 111, 111, 0.0);
  const Canvas g = compose_gt_canvas(zero, zero, zero, zero, spec);
  for (double v : g.pixels.data()) EXPECT_EQ(v, 0.0);
}

TEST(Canvas, ShapeMismatchIsError) {
  const CanvasSpec spec;
  const Image ok(3, 111, 111), bad(3, 110, 111), gray(1, 111, 111);
  EXPECT_THROW(compose_canvas(bad, ok, ok, spec), UsageError);
  EXPECT_THROW(compose_canvas(ok, ok, gray, spec), UsageError);
  EXPECT_THROW(compose_gt_canvas(ok, ok, ok, bad, spec), UsageError);
}

TEST(Tokens, FortyNineBottomRightPositions) {
  const CanvasSpec spec;
  const std::vector<int> idx = masked_token_indices(spec, 14);
  ASSERT_EQ(idx.size(), 49u);
  EXPECT_EQ(idx, centers_inside(spec.cell_rect(Cell::br), 224, 14));
  for (int p : idx) {
    EXPECT_GE(p / 14, 7);
    EXPECT_GE(p % 14, 7);
  }
}

TEST(Tokens, GridSideTwoGivesOneIndex) {
  const CanvasSpec spec;
  EXPECT_EQ(masked_token_indices(spec, 2), (std::vector<int>{3}));
}

TEST(Tokens, CellsAreDisjoint) {
  const CanvasSpec spec;
  std::set<int> seen;
  for (Cell c : kAllCells) {
    const auto idx = cell_token_indices(spec, 14, c);
    EXPECT_EQ(idx, centers_inside(spec.cell_rect(c), 224, 14));
    for (int p : idx) EXPECT_TRUE(seen.insert(p).second);
  }
}

TEST(Tokens, InvalidGrids) {
  EXPECT_THROW(masked_token_indices(CanvasSpec{111, 100, 2, 0.0}, 14), UsageError);
  EXPECT_THROW(masked_token_indices(CanvasSpec{}, 15), UsageError);
  EXPECT_THROW(masked_token_indices(CanvasSpec{}, 0), UsageError);
}
