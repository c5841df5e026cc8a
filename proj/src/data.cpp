#include "lagdiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace lagdiff::data {

namespace fs = std::filesystem;

const std::vector<std::string>& class_words() {
  static const std::vector<std::string> k = {"dog", "cat", "car", "tree",
                                             "fish", "bird", "cup", "hat"};
  return k;
}

const std::vector<std::string>& vocab_words() {
  static const std::vector<std::string> k = {
      "a",    "photo", "of",   "dog",  "cat",   "car",  "tree", "fish",  "bird",
      "cup",  "hat",   "on",   "at",   "in",    "the",  "grass", "snow", "beach",
      "night", "style"};
  return k;
}

int shape_family_of(const std::string& macro_class) {
  const auto& k = class_words();
  for (size_t i = 0; i < k.size(); ++i)
    if (k[i] == macro_class) return int(i);
  throw VocabularyError("unknown macro class '" + macro_class + "'");
}

// --------------------------------------------------------------------------
// Image codecs
// --------------------------------------------------------------------------

void save_ppm(const Tensor& img, const std::string& path) {
  if (img.rank() != 3 || img.dim(0) != 3) throw InputError("save_ppm: expected [3,h,w]");
  int h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot write " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = img.data()[(int64_t(c) * h + y) * w + x];
        v = std::clamp(v, -1.0, 1.0);
        long b = std::lround((v + 1.0) * 0.5 * 255.0);
        row[size_t(x) * 3 + size_t(c)] = (unsigned char)std::clamp(b, 0L, 255L);
      }
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!f) throw FileError("write failed: " + path);
}

namespace {

// PNM token reader: skips whitespace and # comments.
std::string pnm_token(std::istream& f) {
  std::string tok;
  int c;
  while ((c = f.get()) != EOF) {
    if (c == '#') {
      while ((c = f.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) {
      tok.push_back(char(c));
      break;
    }
  }
  while ((c = f.get()) != EOF && !std::isspace(c)) tok.push_back(char(c));
  if (tok.empty()) throw FormatError("unexpected end of PNM header");
  return tok;
}

}  // namespace

Tensor load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot read " + path);
  if (pnm_token(f) != "P6") throw FormatError("not a binary PPM (P6): " + path);
  int w = std::stoi(pnm_token(f));
  int h = std::stoi(pnm_token(f));
  int maxval = std::stoi(pnm_token(f));
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("unsupported PPM header in " + path);
  std::vector<unsigned char> buf(size_t(w) * size_t(h) * 3);
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (f.gcount() != std::streamsize(buf.size())) throw FormatError("PPM pixel data truncated: " + path);
  Tensor img = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.data()[(int64_t(c) * h + y) * w + x] =
            double(buf[(size_t(y) * w + x) * 3 + size_t(c)]) / 255.0 * 2.0 - 1.0;
  return img;
}

void save_pgm(const std::vector<uint8_t>& mask, int h, int w, const std::string& path) {
  if (int64_t(mask.size()) != int64_t(h) * w) throw InputError("save_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot write " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) buf[i] = mask[i] ? 255 : 0;
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

void load_pgm(const std::string& path, std::vector<uint8_t>& mask, int& h, int& w) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot read " + path);
  if (pnm_token(f) != "P5") throw FormatError("not a binary PGM (P5): " + path);
  w = std::stoi(pnm_token(f));
  h = std::stoi(pnm_token(f));
  int maxval = std::stoi(pnm_token(f));
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("unsupported PGM header in " + path);
  std::vector<unsigned char> buf(size_t(w) * size_t(h));
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (f.gcount() != std::streamsize(buf.size())) throw FormatError("PGM pixel data truncated: " + path);
  mask.resize(buf.size());
  for (size_t i = 0; i < buf.size(); ++i) mask[i] = buf[i] > 127 ? 1 : 0;
}

// --------------------------------------------------------------------------
// Manifests and specs
// --------------------------------------------------------------------------

void save_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["version"] = m.version;
  auto& items = j["items"] = nlohmann::json::array();
  for (const auto& it : m.items) {
    nlohmann::json e;
    e["path"] = it.path;
    e["caption"] = it.caption;
    e["split"] = it.split;
    if (!it.concept_id.empty()) e["concept"] = it.concept_id;
    items.push_back(e);
  }
  std::ofstream f(path);
  if (!f) throw FileError("cannot write " + path);
  f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot read " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad manifest json: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  for (const auto& e : j.at("items")) {
    ManifestItem it;
    it.path = e.at("path").get<std::string>();
    it.caption = e.at("caption").get<std::string>();
    it.split = e.at("split").get<std::string>();
    if (e.contains("concept")) it.concept_id = e["concept"].get<std::string>();
    m.items.push_back(std::move(it));
  }
  return m;
}

ConceptSpec concept_spec_from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileError("cannot read " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad concept spec json: " + std::string(e.what()));
  }
  ConceptSpec s;
  s.id = j.at("id").get<std::string>();
  s.macro_class = j.at("macro_class").get<std::string>();
  s.shape_family = j.value("shape_family", -1);
  if (j.contains("color_primary")) s.color_primary = j["color_primary"].get<Color>();
  if (j.contains("color_secondary")) s.color_secondary = j["color_secondary"].get<Color>();
  s.texture = j.value("texture", 0);
  s.background_dist = j.value("background_dist", 0);
  s.size = j.value("size", 8);
  s.reference_count = j.value("reference_count", 4);
  return s;
}

void save_concept_spec(const ConceptSpec& spec, const std::string& path) {
  nlohmann::json j;
  j["id"] = spec.id;
  j["macro_class"] = spec.macro_class;
  j["shape_family"] = spec.shape_family;
  j["color_primary"] = spec.color_primary;
  j["color_secondary"] = spec.color_secondary;
  j["texture"] = spec.texture;
  j["background_dist"] = spec.background_dist;
  j["size"] = spec.size;
  j["reference_count"] = spec.reference_count;
  std::ofstream f(path);
  if (!f) throw FileError("cannot write " + path);
  f << j.dump(2) << "\n";
}

// --------------------------------------------------------------------------
// Sprite rendering
// --------------------------------------------------------------------------

namespace {

bool in_shape(int family, int dx, int dy, int s) {
  switch (family % 8) {
    case 0: return dx * dx + dy * dy <= s * s;                                  // circle
    case 1: return std::max(std::abs(dx), std::abs(dy)) <= (s * 4) / 5;         // square
    case 2: return dy >= -s && dy <= (s * 3) / 5 && 5 * std::abs(dx) <= 3 * (dy + s);  // triangle
    case 3: return std::abs(dx) + std::abs(dy) <= s;                            // diamond
    case 4: {                                                                   // ring
      int d2 = dx * dx + dy * dy;
      int inner = (s * 11) / 20;
      return d2 <= s * s && d2 >= inner * inner;
    }
    case 5:  // plus
      return std::max(std::abs(dx), std::abs(dy)) <= s &&
             (std::abs(dx) <= (s * 2) / 5 || std::abs(dy) <= (s * 2) / 5);
    case 6:  // H bar
      return std::max(std::abs(dx), std::abs(dy)) <= s &&
             (std::abs(dx) >= (s * 3) / 5 || std::abs(dy) <= (s * 3) / 10);
    default:  // X
      return std::max(std::abs(dx), std::abs(dy)) <= s &&
             std::abs(std::abs(dx) - std::abs(dy)) <= (s * 2) / 5;
  }
}

const std::vector<Color>& saturated_palette() {
  // Every entry has at least one channel at +1, far from the muted
  // backgrounds (all channels <= 0), so the sprite region is separable.
  static const std::vector<Color> k = {
      {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}, {1, 1, -1},  {1, -1, 1},
      {-1, 1, 1},  {1, 1, 1},   {1, 0, -1},  {-1, 1, 0}, {0, -1, 1},
  };
  return k;
}

Color random_bg_color(Rng& rng) {
  // Muted: channels in [-0.9, -0.1].
  return {-0.9 + 0.8 * rng.uniform(), -0.9 + 0.8 * rng.uniform(), -0.9 + 0.8 * rng.uniform()};
}

}  // namespace

Tensor render_sprite(int shape_family, const Color& primary, const Color& secondary, int texture,
                     int bg_style, const Color& bg_a, const Color& bg_b, int cx, int cy, int size,
                     int canvas) {
  Tensor img = Tensor::zeros({3, canvas, canvas});
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x) {
      Color px;
      switch (bg_style % 4) {
        case 0: px = bg_a; break;
        case 1: {  // vertical gradient
          double t = double(y) / double(canvas - 1);
          for (int c = 0; c < 3; ++c) px[size_t(c)] = bg_a[size_t(c)] * (1 - t) + bg_b[size_t(c)] * t;
          break;
        }
        case 2: {  // horizontal gradient
          double t = double(x) / double(canvas - 1);
          for (int c = 0; c < 3; ++c) px[size_t(c)] = bg_a[size_t(c)] * (1 - t) + bg_b[size_t(c)] * t;
          break;
        }
        default: px = ((x / 8 + y / 8) % 2 == 0) ? bg_a : bg_b; break;  // checker
      }
      int dx = x - cx, dy = y - cy;
      if (in_shape(shape_family, dx, dy, size)) {
        // Texture phase is centered on the sprite so identity is invariant
        // to where a reference places it.
        int tx = ((dx % 4) + 4) % 4, ty = ((dy % 4) + 4) % 4;
        bool second;
        switch (texture % 4) {
          case 0: second = false; break;
          case 1: second = ty < 2; break;
          case 2: second = tx < 2; break;
          default: second = (((dx % 3) + 3) % 3 == 1) && (((dy % 3) + 3) % 3 == 1); break;
        }
        px = second ? secondary : primary;
      }
      for (int c = 0; c < 3; ++c) img.data()[(int64_t(c) * canvas + y) * canvas + x] = px[size_t(c)];
    }
  return img;
}

ConceptSpec random_concept_spec(const std::string& id, const std::string& macro_class,
                                uint64_t seed) {
  int family = shape_family_of(macro_class);
  Rng rng(seed, /*stream=*/0xC0CCE97);
  const auto& pal = saturated_palette();
  size_t p = size_t(rng.uniform_int(pal.size()));
  size_t q = size_t(rng.uniform_int(pal.size() - 1));
  if (q >= p) ++q;  // distinct identity colors
  ConceptSpec s;
  s.id = id;
  s.macro_class = macro_class;
  s.shape_family = family;
  s.color_primary = pal[p];
  s.color_secondary = pal[q];
  s.texture = int(rng.uniform_int(4));
  s.background_dist = int(rng.uniform_int(4));
  s.size = 7 + int(rng.uniform_int(3));  // 7..9
  s.reference_count = 4;
  return s;
}

namespace {

Tensor render_random_sprite(int family, Rng& rng, int forced_bg_style = -1) {
  const auto& pal = saturated_palette();
  size_t p = size_t(rng.uniform_int(pal.size()));
  size_t q = size_t(rng.uniform_int(pal.size() - 1));
  if (q >= p) ++q;
  int texture = int(rng.uniform_int(4));
  int bg_style = forced_bg_style >= 0 ? forced_bg_style : int(rng.uniform_int(4));
  Color bga = random_bg_color(rng);
  Color bgb = random_bg_color(rng);
  int size = 6 + int(rng.uniform_int(4));
  int lo = size + 2, hi = 31 - size - 2;
  int cx = lo + int(rng.uniform_int(uint64_t(hi - lo + 1)));
  int cy = lo + int(rng.uniform_int(uint64_t(hi - lo + 1)));
  return render_sprite(family, pal[p], pal[q], texture, bg_style, bga, bgb, cx, cy, size);
}

}  // namespace

Tensor random_class_sprite(const std::string& macro_class, uint64_t seed) {
  int family = shape_family_of(macro_class);
  Rng rng(seed, /*stream=*/0x5B121E);
  return render_random_sprite(family, rng);
}

DatasetManifest gen_pretrain_corpus(uint64_t seed, int n, const std::string& out_dir) {
  if (n < 64) throw InputError("gen_pretrain_corpus: need n >= 64, got " + std::to_string(n));
  fs::create_directories(out_dir);
  const auto& classes = class_words();
  Rng rng(seed, /*stream=*/0xDA7A);
  DatasetManifest m;
  for (int i = 0; i < n; ++i) {
    // First 8 cover every class, first 4 every background style; the rest is
    // uniform (the coverage postcondition must hold for any seed).
    int cls = i < 8 ? i : int(rng.uniform_int(classes.size()));
    int bg = i < 4 ? i : -1;
    Tensor img = render_random_sprite(cls, rng, bg);
    char name[64];
    std::snprintf(name, sizeof(name), "pretrain_%05d.ppm", i);
    save_ppm(img, (fs::path(out_dir) / name).string());
    ManifestItem it;
    it.path = name;
    it.caption = "a photo of a " + classes[size_t(cls)];
    it.split = "pretrain";
    m.items.push_back(std::move(it));
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

std::vector<Tensor> gen_concept(const ConceptSpec& spec, uint64_t seed) {
  int family = spec.shape_family >= 0 ? spec.shape_family : shape_family_of(spec.macro_class);
  Rng rng(seed, /*stream=*/0xC0CE);
  std::vector<Tensor> refs;
  for (int i = 0; i < spec.reference_count; ++i) {
    int bg_style = (spec.background_dist + i) % 4;  // pairwise distinct styles
    Color bga = random_bg_color(rng);
    Color bgb = random_bg_color(rng);
    int lo = spec.size + 2, hi = 31 - spec.size - 2;
    int cx = lo + int(rng.uniform_int(uint64_t(hi - lo + 1)));
    int cy = lo + int(rng.uniform_int(uint64_t(hi - lo + 1)));
    refs.push_back(render_sprite(family, spec.color_primary, spec.color_secondary, spec.texture,
                                 bg_style, bga, bgb, cx, cy, spec.size));
  }
  return refs;
}

DatasetManifest write_concept(const ConceptSpec& spec, uint64_t seed, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<Tensor> refs = gen_concept(spec, seed);
  DatasetManifest m;
  for (size_t i = 0; i < refs.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "ref_%02d.ppm", int(i));
    save_ppm(refs[i], (fs::path(out_dir) / name).string());
    ManifestItem it;
    it.path = name;
    it.caption = "a photo of a " + spec.macro_class;
    it.split = "reference";
    it.concept_id = spec.id;
    m.items.push_back(std::move(it));
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  save_concept_spec(spec, (fs::path(out_dir) / "concept.json").string());
  return m;
}

}  // namespace lagdiff::data
