#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "einmemo/canvas.hpp"
#include "einmemo/image.hpp"

namespace einmemo {

// Which canvas images the prompt perturbs: in-context image (I), in-context
// label (L), query (Q), or the joint pairs IL and IQ.
enum class Placement { I, L, IL, Q, IQ };

std::string_view to_string(Placement p);
Placement parse_placement(std::string_view s);
std::vector<Cell> perturbed_cells(Placement p);

// 3 * (2 * pad * (region_h + region_w) - 4 * pad^2); throws if the frame does
// not fit strictly inside the region.
int64_t param_count(int pad, int region_h, int region_w);

// A pad-pixel frame around a region_h x region_w rectangle of the canvas.
struct PromptGeometry {
  int region_h = 0;
  int region_w = 0;
  int pad = 15;
  int channels = 3;

  int64_t param_count() const;
  int64_t per_channel() const { return param_count() / channels; }
  void validate() const;

  // Packed parameter k (within one channel) -> region coordinates. Strips are
  // stored top, bottom, left, right; the side strips exclude the corners.
  std::pair<int, int> frame_position(int64_t k) const;
  // Inverse of frame_position; nullopt for interior pixels.
  std::optional<int64_t> frame_index(int y, int x) const;

  friend bool operator==(const PromptGeometry&, const PromptGeometry&) = default;
};

// Canvas rectangle covered by the prompt region for a placement: the union of
// the quadrants of the perturbed cells (gap pixels included).
Rect prompt_region(const CanvasSpec& spec, Placement p);
PromptGeometry prompt_geometry(const CanvasSpec& spec, Placement p, int pad);

struct BorderPrompt {
  PromptGeometry geometry;
  CanvasSpec canvas;
  Placement variant = Placement::IL;
  double delta = 1.0;
  std::vector<float> values;  // geometry.param_count() entries, channel-major

  Rect region() const { return prompt_region(canvas, variant); }
};

enum class PromptInit { zeros, gaussian };

BorderPrompt init_prompt(const CanvasSpec& spec, Placement variant, int pad, PromptInit mode,
                         uint64_t seed, double delta = 1.0);

// Full region tensor (3 x region_h x region_w); zero off the frame.
Image materialize(const BorderPrompt& p);
Image materialize(const PromptGeometry& g, std::span<const double> values);

struct PromptedImages {
  Image pair_image;
  Image pair_label;
  Image query;
};

// Adds delta * materialized prompt to the images the variant perturbs. Frame
// pixels that land in canvas gaps have no image to act on and are dropped.
// No clamping.
PromptedImages apply(const Image& pair_image, const Image& pair_label, const Image& query,
                     const BorderPrompt& p);
PromptedImages apply(const Image& pair_image, const Image& pair_label, const Image& query,
                     const BorderPrompt& p, std::span<const double> values);

// Chain rule through apply: given d(loss)/d(canvas pixels), returns
// d(loss)/d(prompt parameters). Parameters over gap pixels get 0.
std::vector<double> prompt_gradient(const BorderPrompt& p, const Image& canvas_grad);

// Metadata carried by checkpoints.
struct PromptMetadata {
  int32_t epoch = 0;
  double loss = 0.0;
  uint64_t seed = 0;
  friend bool operator==(const PromptMetadata&, const PromptMetadata&) = default;
};

std::vector<uint8_t> serialize_prompt(const BorderPrompt& p, const PromptMetadata& meta);
std::pair<BorderPrompt, PromptMetadata> deserialize_prompt(std::span<const uint8_t> bytes);
void save_checkpoint(const BorderPrompt& p, const PromptMetadata& meta,
                     const std::filesystem::path& path);
std::pair<BorderPrompt, PromptMetadata> load_checkpoint(const std::filesystem::path& path);

// SHA-256 hex of the raw parameter block.
std::string prompt_checksum(const BorderPrompt& p);

}  // namespace einmemo
