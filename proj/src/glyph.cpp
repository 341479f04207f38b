#include "glyphgen/glyph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace glyphgen {

namespace fs = std::filesystem;

void StyleSpec::validate() const {
  if (!(stroke_width > 0.0f)) {
    throw std::invalid_argument("style: stroke_width must be positive, got " +
                                std::to_string(stroke_width));
  }
  if (slant < -0.5f || slant > 0.5f) {
    throw std::invalid_argument("style: slant out of [-0.5, 0.5]");
  }
  if (curvature < 0.0f || curvature > 1.0f) {
    throw std::invalid_argument("style: curvature out of [0, 1]");
  }
  if (taper < 0.0f || taper > 1.0f) {
    throw std::invalid_argument("style: taper out of [0, 1]");
  }
  if (noise_amp < 0.0f) {
    throw std::invalid_argument("style: noise_amp must be >= 0");
  }
}

std::vector<int> CorpusManifest::domain_indices(char domain) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].domain == domain) out.push_back(static_cast<int>(i));
  }
  return out;
}

bool CorpusManifest::operator==(const CorpusManifest& o) const {
  return canvas == o.canvas && skeletons == o.skeletons && x_styles == o.x_styles &&
         y_styles == o.y_styles && seed == o.seed && records == o.records;
}

Skeleton synth_skeleton(int id, std::uint64_t seed) {
  if (id < 0) throw std::invalid_argument("synth_skeleton: id must be >= 0");
  Rng rng = Rng::stream(seed, rng_stream::kSkeleton, static_cast<std::uint64_t>(id));
  Skeleton sk;
  sk.id = id;
  const int grid = 5;
  auto anchor = [&](int gx, int gy) {
    return Vec2{static_cast<float>(gx) / (grid - 1), static_cast<float>(gy) / (grid - 1)};
  };
  const int n_strokes = 2 + rng.uniform_int(5);  // 2..6
  for (int s = 0; s < n_strokes; ++s) {
    const int n_points = 2 + rng.uniform_int(3);  // 2..4
    std::vector<Vec2> stroke;
    int gx = rng.uniform_int(grid), gy = rng.uniform_int(grid);
    stroke.push_back(anchor(gx, gy));
    for (int p = 1; p < n_points; ++p) {
      // step to a nearby distinct cell so strokes stay local
      int nx = gx, ny = gy;
      while (nx == gx && ny == gy) {
        nx = std::clamp(gx + rng.uniform_int(5) - 2, 0, grid - 1);
        ny = std::clamp(gy + rng.uniform_int(5) - 2, 0, grid - 1);
      }
      gx = nx;
      gy = ny;
      stroke.push_back(anchor(gx, gy));
    }
    sk.strokes.push_back(std::move(stroke));
  }
  return sk;
}

StyleSpec content_style(int canvas) {
  StyleSpec s;
  s.stroke_width = 0.05f * static_cast<float>(canvas);
  return s;
}

StyleSpec style_for_id(int style_id, int canvas, std::uint64_t seed, float noise_amp) {
  if (style_id == 0) {
    StyleSpec s = content_style(canvas);
    return s;
  }
  Rng rng = Rng::stream(seed, rng_stream::kStyleSpec, static_cast<std::uint64_t>(style_id));
  StyleSpec s;
  s.stroke_width = static_cast<float>(canvas) * static_cast<float>(rng.uniform(0.06, 0.14));
  s.slant = static_cast<float>(rng.uniform(-0.4, 0.4));
  s.curvature = static_cast<float>(rng.uniform(0.0, 0.8));
  s.taper = static_cast<float>(rng.uniform(0.0, 0.7));
  s.noise_amp = noise_amp;
  return s;
}

namespace {

struct WidePoint {
  float x, y;
  float halfwidth;
};

float dist_point_segment(float px, float py, const WidePoint& a, const WidePoint& b, float& t) {
  const float dx = b.x - a.x, dy = b.y - a.y;
  const float len2 = dx * dx + dy * dy;
  t = len2 > 0.0f ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float cx = a.x + t * dx, cy = a.y + t * dy;
  return std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
}

}  // namespace

GlyphImage render_glyph(const Skeleton& skeleton, const StyleSpec& style, int size,
                        std::uint64_t rng_seed) {
  if (size < 16) throw std::invalid_argument("render_glyph: size must be >= 16");
  style.validate();
  if (skeleton.strokes.empty()) throw std::invalid_argument("render_glyph: empty skeleton");

  const float margin = 0.14f * static_cast<float>(size);
  const float extent = static_cast<float>(size - 1) - 2.0f * margin;
  const float shear = std::tan(style.slant);
  const bool jitter = style.noise_amp > 0.0f;
  Rng noise = Rng::stream(rng_seed, rng_stream::kRenderNoise,
                          static_cast<std::uint64_t>(skeleton.id));

  // Flatten every stroke into sub-segments with per-vertex halfwidth.
  const int nsub = 12;
  std::vector<std::vector<WidePoint>> paths;
  for (std::size_t si = 0; si < skeleton.strokes.size(); ++si) {
    const auto& stroke = skeleton.strokes[si];
    if (stroke.size() < 2) continue;
    // cumulative arclength (unit space) for the taper profile
    std::vector<float> cum(stroke.size(), 0.0f);
    for (std::size_t i = 1; i < stroke.size(); ++i) {
      const float dx = stroke[i].x - stroke[i - 1].x;
      const float dy = stroke[i].y - stroke[i - 1].y;
      cum[i] = cum[i - 1] + std::sqrt(dx * dx + dy * dy);
    }
    const float total = std::max(cum.back(), 1e-6f);

    std::vector<WidePoint> path;
    for (std::size_t i = 0; i + 1 < stroke.size(); ++i) {
      const Vec2 p0 = stroke[i], p1 = stroke[i + 1];
      const float seg_len = cum[i + 1] - cum[i];
      // quadratic bezier control point; bulge side alternates per segment
      const float side = (i % 2 == 0) ? 1.0f : -1.0f;
      float nx = -(p1.y - p0.y), ny = p1.x - p0.x;
      const float nlen = std::sqrt(nx * nx + ny * ny);
      if (nlen > 0.0f) {
        nx /= nlen;
        ny /= nlen;
      }
      const float bulge = style.curvature * seg_len * 0.35f * side;
      const float mx = 0.5f * (p0.x + p1.x) + nx * bulge;
      const float my = 0.5f * (p0.y + p1.y) + ny * bulge;
      const int start = (i == 0) ? 0 : 1;
      for (int k = start; k <= nsub; ++k) {
        const float u = static_cast<float>(k) / nsub;
        const float omu = 1.0f - u;
        const float ux = omu * omu * p0.x + 2.0f * omu * u * mx + u * u * p1.x;
        const float uy = omu * omu * p0.y + 2.0f * omu * u * my + u * u * p1.y;

        // arclength fraction along the whole stroke for tapering
        const float t_stroke = (cum[i] + u * seg_len) / total;
        const float end_dist = std::min(t_stroke, 1.0f - t_stroke);
        const float ramp = std::min(1.0f, end_dist / 0.3f);
        const float factor = (1.0f - style.taper) + style.taper * ramp;

        // slant shear about the vertical center, then map to pixel space
        const float sx = ux + shear * (0.5f - uy);
        float px = margin + sx * extent;
        float py = margin + uy * extent;
        if (jitter) {
          px += static_cast<float>(noise.uniform(-style.noise_amp, style.noise_amp));
          py += static_cast<float>(noise.uniform(-style.noise_amp, style.noise_amp));
        }
        path.push_back(WidePoint{px, py, 0.5f * style.stroke_width * factor});
      }
    }
    paths.push_back(std::move(path));
  }

  GlyphImage img(size, size, 1.0f);
  std::vector<float> coverage(static_cast<std::size_t>(size) * size, 0.0f);
  for (const auto& path : paths) {
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      const WidePoint& a = path[i];
      const WidePoint& b = path[i + 1];
      const float r = std::max(a.halfwidth, b.halfwidth) + 1.5f;
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r)));
      const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r)));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r)));
      const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          float t = 0.0f;
          const float d = dist_point_segment(static_cast<float>(x), static_cast<float>(y), a, b, t);
          const float hw = a.halfwidth + t * (b.halfwidth - a.halfwidth);
          const float cov = std::clamp(0.5f - (d - hw), 0.0f, 1.0f);
          auto& cell = coverage[static_cast<std::size_t>(y) * size + x];
          cell = std::max(cell, cov);
        }
      }
    }
  }
  for (std::size_t i = 0; i < coverage.size(); ++i) img.pixels[i] = 1.0f - coverage[i];
  return img;
}

// ---------------------------------------------------------------------------
// PGM I/O
// ---------------------------------------------------------------------------

void save_pgm(const GlyphImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_pgm: cannot open '" + path + "' for writing");
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("save_pgm: write failed for '" + path + "'");
}

namespace {

[[noreturn]] void pgm_fail(const std::string& path, std::size_t offset, const std::string& what) {
  throw std::runtime_error("load_pgm: " + what + " in '" + path + "' at byte " +
                           std::to_string(offset));
}

// PNM whitespace / '#' comments.
void skip_space(const std::string& data, std::size_t& pos) {
  while (pos < data.size()) {
    const char c = data[pos];
    if (c == '#') {
      while (pos < data.size() && data[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
      ++pos;
    } else {
      break;
    }
  }
}

int parse_int(const std::string& data, std::size_t& pos, const std::string& path) {
  skip_space(data, pos);
  if (pos >= data.size() || data[pos] < '0' || data[pos] > '9') {
    pgm_fail(path, pos, "expected integer");
  }
  long v = 0;
  while (pos < data.size() && data[pos] >= '0' && data[pos] <= '9') {
    v = v * 10 + (data[pos] - '0');
    if (v > 1 << 20) pgm_fail(path, pos, "integer out of range");
    ++pos;
  }
  return static_cast<int>(v);
}

}  // namespace

GlyphImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_pgm: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();

  std::size_t pos = 0;
  if (data.size() < 2 || data[0] != 'P' || data[1] != '5') pgm_fail(path, 0, "bad magic");
  pos = 2;
  const int w = parse_int(data, pos, path);
  const int h = parse_int(data, pos, path);
  const int maxval = parse_int(data, pos, path);
  if (w <= 0 || h <= 0) pgm_fail(path, pos, "non-positive dimensions");
  if (maxval != 255) pgm_fail(path, pos, "unsupported maxval " + std::to_string(maxval));
  if (pos >= data.size()) pgm_fail(path, pos, "truncated header");
  ++pos;  // single whitespace byte after maxval

  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (data.size() - pos < need) pgm_fail(path, data.size(), "truncated pixel data");
  GlyphImage img(w, h);
  for (std::size_t i = 0; i < need; ++i) {
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(data[pos + i])) / 255.0f;
  }
  return img;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

namespace {

std::string image_name(int skeleton_id, int style_id) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d_%04d.pgm", skeleton_id, style_id);
  return buf;
}

std::uint64_t render_seed(std::uint64_t corpus_seed, int skeleton_id, int style_id) {
  return Rng::stream(corpus_seed, rng_stream::kRenderNoise,
                     (static_cast<std::uint64_t>(skeleton_id) << 20) ^
                         static_cast<std::uint64_t>(style_id))
      .next_u64();
}

}  // namespace

CorpusManifest build_corpus(const CorpusConfig& config, const std::string& out_dir) {
  if (config.skeletons < 1 || config.y_styles < 1) {
    throw std::invalid_argument("build_corpus: need at least 1 skeleton and 1 Y style");
  }
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "X", ec);
  fs::create_directories(fs::path(out_dir) / "Y", ec);
  if (ec) throw std::runtime_error("build_corpus: cannot create '" + out_dir + "': " + ec.message());

  CorpusManifest m;
  m.canvas = config.canvas;
  m.skeletons = config.skeletons;
  m.x_styles = 1;
  m.y_styles = config.y_styles;
  m.seed = config.seed;

  auto emit = [&](int k, int s, char domain) {
    const Skeleton sk = synth_skeleton(k, config.seed);
    const StyleSpec style = style_for_id(s, config.canvas, config.seed,
                                         s == 0 ? 0.0f : config.noise_amp);
    const GlyphImage img =
        render_glyph(sk, style, config.canvas, render_seed(config.seed, k, s));
    const std::string rel = std::string(1, domain) + "/" + image_name(k, s);
    save_pgm(img, (fs::path(out_dir) / rel).string());
    m.records.push_back(ManifestRecord{rel, k, s, domain});
  };

  for (int k = 0; k < config.skeletons; ++k) emit(k, 0, 'X');
  for (int k = 0; k < config.skeletons; ++k) {
    for (int s = 1; s <= config.y_styles; ++s) emit(k, s, 'Y');
  }

  save_manifest(m, (fs::path(out_dir) / "manifest.tsv").string());
  return m;
}

void save_manifest(const CorpusManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_manifest: cannot open '" + path + "'");
  out << "# canvas\t" << manifest.canvas << "\n";
  out << "# skeletons\t" << manifest.skeletons << "\n";
  out << "# x_styles\t" << manifest.x_styles << "\n";
  out << "# y_styles\t" << manifest.y_styles << "\n";
  out << "# seed\t" << manifest.seed << "\n";
  out << "path\tskeleton_id\tstyle_id\tdomain\n";
  for (const auto& r : manifest.records) {
    out << r.path << '\t' << r.skeleton_id << '\t' << r.style_id << '\t' << r.domain << '\n';
  }
  if (!out) throw std::runtime_error("save_manifest: write failed for '" + path + "'");
}

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_manifest: cannot open '" + path + "'");
  CorpusManifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream is(line.substr(1));
      std::string key;
      is >> key;
      if (key == "canvas") is >> m.canvas;
      else if (key == "skeletons") is >> m.skeletons;
      else if (key == "x_styles") is >> m.x_styles;
      else if (key == "y_styles") is >> m.y_styles;
      else if (key == "seed") is >> m.seed;
      continue;
    }
    if (line.rfind("path\t", 0) == 0) continue;  // header row
    std::istringstream is(line);
    ManifestRecord r;
    std::string domain;
    if (!std::getline(is, r.path, '\t')) {
      throw std::runtime_error("load_manifest: malformed line " + std::to_string(lineno));
    }
    std::string field;
    if (!std::getline(is, field, '\t')) throw std::runtime_error("load_manifest: malformed line " + std::to_string(lineno));
    r.skeleton_id = std::stoi(field);
    if (!std::getline(is, field, '\t')) throw std::runtime_error("load_manifest: malformed line " + std::to_string(lineno));
    r.style_id = std::stoi(field);
    if (!std::getline(is, domain)) throw std::runtime_error("load_manifest: malformed line " + std::to_string(lineno));
    if (domain != "X" && domain != "Y") {
      throw std::runtime_error("load_manifest: bad domain '" + domain + "' at line " +
                               std::to_string(lineno));
    }
    r.domain = domain[0];
    m.records.push_back(std::move(r));
  }
  return m;
}

std::vector<int> sample_indices(const CorpusManifest& manifest, char domain, int batch, Rng& rng) {
  std::vector<int> pool = manifest.domain_indices(domain);
  const int n = static_cast<int>(pool.size());
  if (batch < 1 || batch > n) {
    throw std::invalid_argument("sample_indices: batch " + std::to_string(batch) +
                                " out of range for domain of size " + std::to_string(n));
  }
  // partial Fisher-Yates: first `batch` entries are a uniform draw without replacement
  for (int i = 0; i < batch; ++i) {
    const int j = i + rng.uniform_int(n - i);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(batch));
  return pool;
}

Batch sample_batch(const CorpusManifest& manifest, const std::string& corpus_dir, char domain,
                   int batch, Rng& rng) {
  Batch out;
  for (int idx : sample_indices(manifest, domain, batch, rng)) {
    const auto& rec = manifest.records[static_cast<std::size_t>(idx)];
    out.images.push_back(load_pgm((fs::path(corpus_dir) / rec.path).string()));
    out.records.push_back(rec);
  }
  return out;
}

Tensor images_to_tensor(const std::vector<GlyphImage>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const int h = images[0].height, w = images[0].width;
  std::vector<float> v;
  v.reserve(images.size() * static_cast<std::size_t>(h) * w);
  for (const auto& img : images) {
    if (img.height != h || img.width != w) {
      throw std::invalid_argument("images_to_tensor: mixed image sizes");
    }
    v.insert(v.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor({static_cast<int>(images.size()), 1, h, w}, std::move(v));
}

GlyphImage tensor_to_image(const Tensor& t, int index) {
  if (t.rank() != 4 || t.dim(1) != 1) {
    shape_error("tensor_to_image: expected [N,1,H,W], got " + shape_str(t.shape()));
  }
  if (index < 0 || index >= t.dim(0)) {
    throw std::invalid_argument("tensor_to_image: index out of range");
  }
  const int h = t.dim(2), w = t.dim(3);
  GlyphImage img(w, h);
  const std::size_t base = static_cast<std::size_t>(index) * h * w;
  for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
    img.pixels[i] = std::clamp(t[static_cast<std::int64_t>(base + i)], 0.0f, 1.0f);
  }
  return img;
}

double mean_ink_fraction(const GlyphImage& img) {
  double acc = 0.0;
  for (float p : img.pixels) acc += 1.0 - p;
  return acc / static_cast<double>(img.pixels.size());
}

}  // namespace glyphgen
