#pragma once

// Procedural glyph corpus: content identities are stroke skeletons on a 5x5
// anchor grid, styles are rendering parameter sets. Images travel as binary
// P5 PGM so files are bit-exact and parseable anywhere.

#include <cstdint>
#include <string>
#include <vector>

#include "glyphgen/rng.hpp"
#include "glyphgen/tensor.hpp"

namespace glyphgen {

// Single-channel raster with values in [0,1]; 0 = ink, 1 = background.
struct GlyphImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // row-major

  GlyphImage() = default;
  GlyphImage(int w, int h, float fill = 1.0f)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

struct Vec2 {
  float x = 0.0f;
  float y = 0.0f;
};

// Stroke polylines in the unit square, a pure function of (id, seed).
struct Skeleton {
  int id = 0;
  std::vector<std::vector<Vec2>> strokes;
};

struct StyleSpec {
  float stroke_width = 2.0f;  // pixels, > 0
  float slant = 0.0f;         // radians in [-0.5, 0.5]
  float curvature = 0.0f;     // [0,1], bulge applied to segments
  float taper = 0.0f;         // [0,1], width falloff toward stroke ends
  float noise_amp = 0.0f;     // >= 0, boundary jitter in pixels

  void validate() const;
};

struct ManifestRecord {
  std::string path;  // relative to the corpus directory
  int skeleton_id = 0;
  int style_id = 0;
  char domain = 'X';
};

struct CorpusManifest {
  int canvas = 0;
  int skeletons = 0;
  int x_styles = 1;
  int y_styles = 0;
  std::uint64_t seed = 0;
  std::vector<ManifestRecord> records;

  std::vector<int> domain_indices(char domain) const;
  bool operator==(const CorpusManifest&) const;
};

inline bool operator==(const ManifestRecord& a, const ManifestRecord& b) {
  return a.path == b.path && a.skeleton_id == b.skeleton_id && a.style_id == b.style_id &&
         a.domain == b.domain;
}

struct CorpusConfig {
  int skeletons = 10;
  int y_styles = 4;
  int canvas = 64;
  std::uint64_t seed = 7;
  float noise_amp = 0.0f;  // applied to Y styles
};

// Deterministic skeleton with 2-6 strokes on a 5x5 grid of anchor points.
Skeleton synth_skeleton(int id, std::uint64_t seed);

// The fixed "content" style (domain X, style id 0).
StyleSpec content_style(int canvas);

// Style roster entry for ids >= 1, derived from the corpus seed.
StyleSpec style_for_id(int style_id, int canvas, std::uint64_t seed, float noise_amp = 0.0f);

// Rasterize with anti-aliasing via distance-to-segment coverage. With
// noise_amp == 0 the result does not depend on rng_seed.
GlyphImage render_glyph(const Skeleton& skeleton, const StyleSpec& style, int size,
                        std::uint64_t rng_seed = 0);

// Render the corpus into out_dir (X/, Y/, manifest.tsv) and return the manifest.
CorpusManifest build_corpus(const CorpusConfig& config, const std::string& out_dir);

void save_manifest(const CorpusManifest& manifest, const std::string& path);
CorpusManifest load_manifest(const std::string& path);

// Binary P5, maxval 255, pixel byte = round(value * 255).
void save_pgm(const GlyphImage& img, const std::string& path);
GlyphImage load_pgm(const std::string& path);

// Uniform sampling without replacement within a batch; returns record indices.
std::vector<int> sample_indices(const CorpusManifest& manifest, char domain, int batch, Rng& rng);

struct Batch {
  std::vector<GlyphImage> images;
  std::vector<ManifestRecord> records;
};

// sample_indices plus image loads from the corpus directory.
Batch sample_batch(const CorpusManifest& manifest, const std::string& corpus_dir, char domain,
                   int batch, Rng& rng);

// [count,1,H,W] tensor from images (and back, per batch element).
Tensor images_to_tensor(const std::vector<GlyphImage>& images);
GlyphImage tensor_to_image(const Tensor& t, int index = 0);

double mean_ink_fraction(const GlyphImage& img);

}  // namespace glyphgen
