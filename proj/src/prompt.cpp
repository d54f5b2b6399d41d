#include "einmemo/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "einmemo/binary_io.hpp"
#include "einmemo/digest.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/rng.hpp"

namespace einmemo {

std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::I: return "I";
    case Placement::L: return "L";
    case Placement::IL: return "IL";
    case Placement::Q: return "Q";
    case Placement::IQ: return "IQ";
  }
  return "?";
}

Placement parse_placement(std::string_view s) {
  for (Placement p : {Placement::I, Placement::L, Placement::IL, Placement::Q, Placement::IQ}) {
    if (to_string(p) == s) return p;
  }
  throw UsageError("unknown prompt variant '" + std::string(s) + "' (expected I, L, IL, Q or IQ)");
}

std::vector<Cell> perturbed_cells(Placement p) {
  switch (p) {
    case Placement::I: return {Cell::tl};
    case Placement::L: return {Cell::tr};
    case Placement::IL: return {Cell::tl, Cell::tr};
    case Placement::Q: return {Cell::bl};
    case Placement::IQ: return {Cell::tl, Cell::bl};
  }
  return {};
}

int64_t param_count(int pad, int region_h, int region_w) {
  if (pad < 0 || region_h <= 0 || region_w <= 0 || 2 * pad >= std::min(region_h, region_w)) {
    throw UsageError("prompt frame of " + std::to_string(pad) + " pixels does not fit a " +
                     std::to_string(region_h) + "x" + std::to_string(region_w) + " region");
  }
  const int64_t p = pad;
  return 3 * (2 * p * (region_h + region_w) - 4 * p * p);
}

int64_t PromptGeometry::param_count() const {
  return einmemo::param_count(pad, region_h, region_w) / 3 * channels;
}

void PromptGeometry::validate() const {
  if (channels != 3) throw UsageError("prompt geometry must have 3 channels");
  (void)einmemo::param_count(pad, region_h, region_w);
}

std::pair<int, int> PromptGeometry::frame_position(int64_t k) const {
  const int64_t strip_h = static_cast<int64_t>(pad) * region_w;
  const int64_t side = static_cast<int64_t>(region_h - 2 * pad) * pad;
  if (k < strip_h) return {static_cast<int>(k / region_w), static_cast<int>(k % region_w)};
  k -= strip_h;
  if (k < strip_h) {
    return {region_h - pad + static_cast<int>(k / region_w), static_cast<int>(k % region_w)};
  }
  k -= strip_h;
  if (k < side) return {pad + static_cast<int>(k / pad), static_cast<int>(k % pad)};
  k -= side;
  return {pad + static_cast<int>(k / pad), region_w - pad + static_cast<int>(k % pad)};
}

std::optional<int64_t> PromptGeometry::frame_index(int y, int x) const {
  if (y < 0 || x < 0 || y >= region_h || x >= region_w) return std::nullopt;
  const int64_t strip_h = static_cast<int64_t>(pad) * region_w;
  const int64_t side = static_cast<int64_t>(region_h - 2 * pad) * pad;
  if (y < pad) return static_cast<int64_t>(y) * region_w + x;
  if (y >= region_h - pad) return strip_h + static_cast<int64_t>(y - (region_h - pad)) * region_w + x;
  if (x < pad) return 2 * strip_h + static_cast<int64_t>(y - pad) * pad + x;
  if (x >= region_w - pad) return 2 * strip_h + side + static_cast<int64_t>(y - pad) * pad + (x - (region_w - pad));
  return std::nullopt;
}

Rect prompt_region(const CanvasSpec& spec, Placement p) {
  const auto cells = perturbed_cells(p);
  Rect r = spec.quadrant(cells.front());
  for (Cell c : cells) {
    const Rect q = spec.quadrant(c);
    const int top = std::min(r.top, q.top), left = std::min(r.left, q.left);
    const int bottom = std::max(r.bottom(), q.bottom()), right = std::max(r.right(), q.right());
    r = Rect{top, left, bottom - top, right - left};
  }
  return r;
}

PromptGeometry prompt_geometry(const CanvasSpec& spec, Placement p, int pad) {
  const Rect r = prompt_region(spec, p);
  PromptGeometry g{r.height, r.width, pad, 3};
  g.validate();
  return g;
}

BorderPrompt init_prompt(const CanvasSpec& spec, Placement variant, int pad, PromptInit mode,
                         uint64_t seed, double delta) {
  BorderPrompt p;
  p.canvas = spec;
  p.variant = variant;
  p.delta = delta;
  p.geometry = prompt_geometry(spec, variant, pad);
  p.values.assign(static_cast<size_t>(p.geometry.param_count()), 0.0f);
  if (mode == PromptInit::gaussian) {
    Rng rng = make_rng({seed, 0x9e0});
    std::normal_distribution<double> normal(0.0, 0.02);
    for (float& v : p.values) v = static_cast<float>(normal(rng));
  }
  return p;
}

Image materialize(const PromptGeometry& g, std::span<const double> values) {
  if (static_cast<int64_t>(values.size()) != g.param_count()) {
    throw UsageError("prompt parameter count does not match geometry");
  }
  Image out(g.channels, g.region_h, g.region_w);
  const int64_t per_channel = g.per_channel();
  for (int c = 0; c < g.channels; ++c) {
    for (int64_t k = 0; k < per_channel; ++k) {
      const auto [y, x] = g.frame_position(k);
      out.at(c, y, x) = values[c * per_channel + k];
    }
  }
  return out;
}

Image materialize(const BorderPrompt& p) {
  std::vector<double> v(p.values.begin(), p.values.end());
  return materialize(p.geometry, v);
}

PromptedImages apply(const Image& pair_image, const Image& pair_label, const Image& query,
                     const BorderPrompt& p, std::span<const double> values) {
  const CanvasSpec& spec = p.canvas;
  for (const Image* img : {&pair_image, &pair_label, &query}) {
    if (img->channels() != 3 || img->height() != spec.cell_h || img->width() != spec.cell_w) {
      throw UsageError("image size does not match the prompt's canvas geometry");
    }
  }
  if (prompt_geometry(spec, p.variant, p.geometry.pad) != p.geometry) {
    throw UsageError("prompt geometry does not match its canvas spec");
  }
  PromptedImages out{pair_image, pair_label, query};
  if (p.delta == 0.0) return out;
  const Image frame = materialize(p.geometry, values);
  const Rect region = p.region();
  for (Cell cell : perturbed_cells(p.variant)) {
    Image& target = cell == Cell::tl ? out.pair_image : cell == Cell::tr ? out.pair_label : out.query;
    const Rect r = spec.cell_rect(cell);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
          target.at(c, y, x) += p.delta * frame.at(c, r.top + y - region.top, r.left + x - region.left);
        }
      }
    }
  }
  return out;
}

PromptedImages apply(const Image& pair_image, const Image& pair_label, const Image& query,
                     const BorderPrompt& p) {
  std::vector<double> v(p.values.begin(), p.values.end());
  return apply(pair_image, pair_label, query, p, v);
}

std::vector<double> prompt_gradient(const BorderPrompt& p, const Image& canvas_grad) {
  const CanvasSpec& spec = p.canvas;
  if (canvas_grad.height() != spec.canvas_h() || canvas_grad.width() != spec.canvas_w()) {
    throw UsageError("canvas gradient has the wrong shape");
  }
  const PromptGeometry& g = p.geometry;
  const Rect region = p.region();
  const auto cells = perturbed_cells(p.variant);
  const int64_t per_channel = g.per_channel();
  std::vector<double> grad(static_cast<size_t>(g.param_count()), 0.0);
  for (int64_t k = 0; k < per_channel; ++k) {
    const auto [ry, rx] = g.frame_position(k);
    const int y = region.top + ry, x = region.left + rx;
    const bool on_image = std::any_of(cells.begin(), cells.end(),
                                      [&](Cell c) { return spec.cell_rect(c).contains(y, x); });
    if (!on_image) continue;
    for (int c = 0; c < g.channels; ++c) grad[c * per_channel + k] = p.delta * canvas_grad.at(c, y, x);
  }
  return grad;
}

// Checkpoint layout (little-endian):
//   "EIMP" u32 version | canvas: i32 cell_h, i32 cell_w, i32 gap, f64 fill |
//   i32 variant, i32 pad, i32 region_h, i32 region_w, f64 delta |
//   i32 epoch, f64 loss, u64 seed | u64 n, f32[n] | sha256 of everything before.
namespace {
constexpr uint32_t kPromptMagic = 0x504d4945;  // "EIMP"
constexpr uint32_t kPromptVersion = 1;
}  // namespace

std::vector<uint8_t> serialize_prompt(const BorderPrompt& p, const PromptMetadata& meta) {
  ByteWriter w;
  w.put(kPromptMagic);
  w.put(kPromptVersion);
  w.put<int32_t>(p.canvas.cell_h);
  w.put<int32_t>(p.canvas.cell_w);
  w.put<int32_t>(p.canvas.gap);
  w.put<double>(p.canvas.fill);
  w.put<int32_t>(static_cast<int32_t>(p.variant));
  w.put<int32_t>(p.geometry.pad);
  w.put<int32_t>(p.geometry.region_h);
  w.put<int32_t>(p.geometry.region_w);
  w.put<double>(p.delta);
  w.put<int32_t>(meta.epoch);
  w.put<double>(meta.loss);
  w.put<uint64_t>(meta.seed);
  w.put<uint64_t>(p.values.size());
  w.put_array<float>(p.values);
  const Sha256 digest = sha256(w.bytes());
  w.put_bytes(digest);
  return w.bytes();
}

std::pair<BorderPrompt, PromptMetadata> deserialize_prompt(std::span<const uint8_t> bytes) {
  if (bytes.size() < 32) throw DataError("corrupt prompt checkpoint: too short");
  const auto body = bytes.first(bytes.size() - 32);
  const Sha256 digest = sha256(body);
  if (!std::equal(digest.begin(), digest.end(), bytes.end() - 32)) {
    throw DataError("corrupt prompt checkpoint: digest mismatch");
  }
  ByteReader r(body);
  if (r.get<uint32_t>() != kPromptMagic) throw DataError("not a prompt checkpoint");
  if (r.get<uint32_t>() != kPromptVersion) throw DataError("unsupported prompt checkpoint version");
  BorderPrompt p;
  PromptMetadata meta;
  p.canvas.cell_h = r.get<int32_t>();
  p.canvas.cell_w = r.get<int32_t>();
  p.canvas.gap = r.get<int32_t>();
  p.canvas.fill = r.get<double>();
  const auto variant = r.get<int32_t>();
  if (variant < 0 || variant > static_cast<int32_t>(Placement::IQ)) {
    throw DataError("corrupt prompt checkpoint: bad variant");
  }
  p.variant = static_cast<Placement>(variant);
  p.geometry.pad = r.get<int32_t>();
  p.geometry.region_h = r.get<int32_t>();
  p.geometry.region_w = r.get<int32_t>();
  p.delta = r.get<double>();
  meta.epoch = r.get<int32_t>();
  meta.loss = r.get<double>();
  meta.seed = r.get<uint64_t>();
  const auto n = r.get<uint64_t>();
  try {
    p.canvas.validate();
    if (prompt_geometry(p.canvas, p.variant, p.geometry.pad) != p.geometry) {
      throw DataError("corrupt prompt checkpoint: inconsistent geometry");
    }
  } catch (const UsageError& e) {
    throw DataError(std::string("corrupt prompt checkpoint: ") + e.what());
  }
  if (static_cast<int64_t>(n) != p.geometry.param_count() || r.remaining() != n * sizeof(float)) {
    throw DataError("corrupt prompt checkpoint: parameter block size");
  }
  p.values.resize(n);
  r.get_array<float>(p.values);
  return {std::move(p), meta};
}

void save_checkpoint(const BorderPrompt& p, const PromptMetadata& meta,
                     const std::filesystem::path& path) {
  write_file_bytes(path, serialize_prompt(p, meta));
}

std::pair<BorderPrompt, PromptMetadata> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_prompt(read_file_bytes(path));
}

std::string prompt_checksum(const BorderPrompt& p) {
  const auto* bytes = reinterpret_cast<const uint8_t*>(p.values.data());
  return to_hex(sha256({bytes, p.values.size() * sizeof(float)}));
}

}  // namespace einmemo
