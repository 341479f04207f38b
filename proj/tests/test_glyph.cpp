#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "glyphgen/glyph.hpp"

using namespace glyphgen;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("glyphgen_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("skeleton synthesis is deterministic and distinct across ids") {
  auto a = synth_skeleton(3, 42);
  auto b = synth_skeleton(3, 42);
  REQUIRE(a.strokes.size() == b.strokes.size());
  for (std::size_t s = 0; s < a.strokes.size(); ++s) {
    REQUIRE(a.strokes[s].size() == b.strokes[s].size());
    for (std::size_t p = 0; p < a.strokes[s].size(); ++p) {
      CHECK(a.strokes[s][p].x == b.strokes[s][p].x);
      CHECK(a.strokes[s][p].y == b.strokes[s][p].y);
    }
  }

  auto key = [](const Skeleton& sk) {
    std::string k;
    for (const auto& stroke : sk.strokes) {
      for (const auto& pt : stroke) {
        k += std::to_string(pt.x) + "," + std::to_string(pt.y) + ";";
      }
      k += "|";
    }
    return k;
  };
  std::set<std::string> keys;
  for (int id = 0; id < 10; ++id) keys.insert(key(synth_skeleton(id, 42)));
  CHECK(keys.size() == 10);

  for (int id = 0; id < 10; ++id) {
    auto sk = synth_skeleton(id, 42);
    CHECK(sk.strokes.size() >= 2);
    CHECK(sk.strokes.size() <= 6);
    for (const auto& stroke : sk.strokes) {
      for (const auto& pt : stroke) {
        CHECK(pt.x >= 0.0f);
        CHECK(pt.x <= 1.0f);
        CHECK(pt.y >= 0.0f);
        CHECK(pt.y <= 1.0f);
      }
    }
  }

  CHECK_THROWS_AS(synth_skeleton(-1, 42), std::invalid_argument);
}

TEST_CASE("render determinism and style sensitivity") {
  auto sk = synth_skeleton(1, 7);
  StyleSpec style = content_style(32);

  auto a = render_glyph(sk, style, 32, 123);
  auto b = render_glyph(sk, style, 32, 456);  // noise_amp == 0: seed must not matter
  CHECK(a.pixels == b.pixels);

  const double ink = mean_ink_fraction(a);
  CHECK(ink > 0.01);
  CHECK(ink < 0.6);

  StyleSpec slanted = style;
  slanted.slant = 0.4f;
  auto c = render_glyph(sk, slanted, 32, 123);
  int diff = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    if (a.pixels[i] != c.pixels[i]) ++diff;
  }
  CHECK(diff >= static_cast<int>(a.pixels.size() / 100));

  StyleSpec bad;
  bad.stroke_width = 0.0f;
  CHECK_THROWS_AS(render_glyph(sk, bad, 32, 0), std::invalid_argument);
  CHECK_THROWS_AS(render_glyph(sk, style, 8, 0), std::invalid_argument);
}

TEST_CASE("render with noise depends on seed but stays in range") {
  auto sk = synth_skeleton(2, 7);
  StyleSpec style = content_style(32);
  style.noise_amp = 1.0f;
  auto a = render_glyph(sk, style, 32, 1);
  auto b = render_glyph(sk, style, 32, 2);
  CHECK(a.pixels != b.pixels);
  for (float p : a.pixels) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
}

TEST_CASE("corpus build: counts, determinism, manifest round trip") {
  auto dir1 = temp_dir("corpus1");
  auto dir2 = temp_dir("corpus2");
  CorpusConfig cfg;
  cfg.skeletons = 10;
  cfg.y_styles = 4;
  cfg.canvas = 32;
  cfg.seed = 7;

  auto m1 = build_corpus(cfg, dir1.string());
  CHECK(m1.records.size() == 10u * (1 + 4));
  CHECK(m1.domain_indices('X').size() == 10);
  CHECK(m1.domain_indices('Y').size() == 40);
  for (const auto& r : m1.records) {
    CHECK(fs::exists(dir1 / r.path));
  }

  auto m2 = build_corpus(cfg, dir2.string());
  CHECK(m1 == m2);
  for (const auto& r : m1.records) {
    CHECK(file_bytes(dir1 / r.path) == file_bytes(dir2 / r.path));
  }
  CHECK(file_bytes(dir1 / "manifest.tsv") == file_bytes(dir2 / "manifest.tsv"));

  auto loaded = load_manifest((dir1 / "manifest.tsv").string());
  CHECK(loaded == m1);

  // every record re-renders to the stored bytes when noise_amp == 0
  for (const auto& r : m1.records) {
    auto sk = synth_skeleton(r.skeleton_id, cfg.seed);
    auto style = style_for_id(r.style_id, cfg.canvas, cfg.seed);
    auto img = render_glyph(sk, style, cfg.canvas, 0);
    auto stored = load_pgm((dir1 / r.path).string());
    REQUIRE(stored.pixels.size() == img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      CHECK(std::abs(stored.pixels[i] - img.pixels[i]) <= 1.0f / 510.0f);
    }
  }

  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("pgm round trip and error contract") {
  auto dir = temp_dir("pgm");
  GlyphImage img(17, 9);
  Rng rng(5);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  const auto path = (dir / "t.pgm").string();
  save_pgm(img, path);
  auto back = load_pgm(path);
  REQUIRE(back.width == 17);
  REQUIRE(back.height == 9);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 1.0f / 510.0f);
  }

  // all-background file body is all 255
  GlyphImage bg(4, 4, 1.0f);
  const auto bgpath = (dir / "bg.pgm").string();
  save_pgm(bg, bgpath);
  auto bytes = file_bytes(bgpath);
  const std::string header = "P5\n4 4\n255\n";
  REQUIRE(bytes.substr(0, header.size()) == header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) {
    CHECK(static_cast<unsigned char>(bytes[i]) == 255);
  }

  // bad magic
  {
    std::ofstream out(dir / "bad.pgm", std::ios::binary);
    out << "P6\n2 2\n255\n....";
  }
  CHECK_THROWS_WITH_AS(load_pgm((dir / "bad.pgm").string()), doctest::Contains("bad magic"),
                       std::runtime_error);

  // truncated body
  {
    std::ofstream out(dir / "trunc.pgm", std::ios::binary);
    out << "P5\n4 4\n255\nab";
  }
  CHECK_THROWS_WITH_AS(load_pgm((dir / "trunc.pgm").string()), doctest::Contains("truncated"),
                       std::runtime_error);

  fs::remove_all(dir);
}

TEST_CASE("batch sampling: permutation, determinism, uniformity, independence") {
  auto dir = temp_dir("sample");
  CorpusConfig cfg;
  cfg.skeletons = 5;
  cfg.y_styles = 2;
  cfg.canvas = 32;
  cfg.seed = 3;
  auto m = build_corpus(cfg, dir.string());

  // batch == domain size -> permutation
  {
    Rng rng(1);
    auto idx = sample_indices(m, 'Y', 10, rng);
    std::set<int> uniq(idx.begin(), idx.end());
    CHECK(uniq.size() == 10);
  }

  // fixed seed -> identical sequence
  {
    Rng r1(9), r2(9);
    CHECK(sample_indices(m, 'X', 3, r1) == sample_indices(m, 'X', 3, r2));
  }

  // frequency within +-20% of uniform over 10,000 selections
  {
    Rng rng(17);
    std::vector<int> counts(m.records.size(), 0);
    const int draws = 2500, batch = 4;  // 10,000 selections from domain Y (size 10)
    for (int d = 0; d < draws; ++d) {
      for (int i : sample_indices(m, 'Y', batch, rng)) counts[static_cast<std::size_t>(i)]++;
    }
    const double expected = draws * batch / 10.0;
    for (int i : m.domain_indices('Y')) {
      CHECK(counts[static_cast<std::size_t>(i)] > expected * 0.8);
      CHECK(counts[static_cast<std::size_t>(i)] < expected * 1.2);
    }
  }

  // X and Y draws from distinct streams are not correlated in lockstep
  {
    Rng rx = Rng::stream(7, rng_stream::kBatchX, 0);
    Rng ry = Rng::stream(7, rng_stream::kBatchY, 0);
    auto xs = sample_indices(m, 'X', 5, rx);
    auto ys = sample_indices(m, 'Y', 5, ry);
    // same positions would require identical index sequences modulo offset
    bool all_same_offset = true;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (ys[i] - xs[i] != ys[0] - xs[0]) all_same_offset = false;
    }
    CHECK_FALSE(all_same_offset);
  }

  // batch too large
  {
    Rng rng(1);
    CHECK_THROWS_AS(sample_indices(m, 'X', 6, rng), std::invalid_argument);
  }

  // sample_batch loads the right files
  {
    Rng rng(4);
    auto batch = sample_batch(m, dir.string(), 'Y', 3, rng);
    REQUIRE(batch.images.size() == 3);
    REQUIRE(batch.records.size() == 3);
    for (const auto& img : batch.images) {
      CHECK(img.width == 32);
      CHECK(img.height == 32);
    }
    auto t = images_to_tensor(batch.images);
    CHECK(t.shape() == Shape{3, 1, 32, 32});
    auto round = tensor_to_image(t, 1);
    CHECK(round.pixels == batch.images[1].pixels);
  }

  fs::remove_all(dir);
}
