#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seqdet/common.hpp"
#include "seqdet/rng.hpp"
#include "seqdet/seqops.hpp"
#include "seqdet/tensor.hpp"

namespace seqdet {

// Procedural ordered-edit images: a soft per-sample background overdrawn by
// up to five class-specific textured disks. The disks share a ring around the
// image center, so every pair of stamp regions overlaps and later edits
// partially occlude earlier ones; the application order is the label.
struct SyntheticSpec {
  std::size_t img_size = 32;
  std::size_t classes = 8;
  std::uint64_t seed = 1;
  double alpha = 0.85;   // stamp opacity
  double noise = 0.015;  // background noise level
};

namespace synth {

struct Rgb {
  double r, g, b;
};

inline Rgb class_color(std::size_t cls, std::size_t n_classes) {
  // evenly spaced hues, fixed saturation/value
  double h = 6.0 * double(cls) / double(n_classes);
  double s = 0.8, v = 0.9;
  int i = int(h) % 6;
  double f = h - std::floor(h);
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Class-specific oriented sine grating that modulates the stamp color.
inline double class_texture(std::size_t cls, std::size_t n_classes, double x,
                            double y) {
  double ang = 3.14159265358979323846 * double(cls) / double(n_classes);
  double freq = 0.55 + 0.12 * double(cls);
  double phase = freq * (x * std::cos(ang) + y * std::sin(ang));
  return 0.72 + 0.28 * std::sin(phase);
}

inline void stamp_center(const SyntheticSpec& spec, std::size_t cls,
                         double& cx, double& cy) {
  double mid = 0.5 * double(spec.img_size - 1);
  double ring = 0.25 * double(spec.img_size);
  double ang = 6.28318530717958647692 * double(cls) / double(spec.classes);
  cx = mid + ring * std::cos(ang);
  cy = mid + ring * std::sin(ang);
}

inline double stamp_radius(const SyntheticSpec& spec) {
  return 0.28 * double(spec.img_size);
}

}  // namespace synth

// Paints one edit onto a planar RGB double image in [0,1].
inline void paint_stamp(std::vector<double>& img, const SyntheticSpec& spec,
                        std::size_t cls) {
  const std::size_t s = spec.img_size, hw = s * s;
  double cx, cy;
  synth::stamp_center(spec, cls, cx, cy);
  const double r = synth::stamp_radius(spec), r2 = r * r;
  const auto col = synth::class_color(cls, spec.classes);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      double dx = double(x) - cx, dy = double(y) - cy;
      if (dx * dx + dy * dy > r2) continue;
      double tex =
          synth::class_texture(cls, spec.classes, double(x), double(y));
      double sr = col.r * tex, sg = col.g * tex, sb = col.b * tex;
      std::size_t p = y * s + x;
      img[p] = (1 - spec.alpha) * img[p] + spec.alpha * sr;
      img[hw + p] = (1 - spec.alpha) * img[hw + p] + spec.alpha * sg;
      img[2 * hw + p] = (1 - spec.alpha) * img[2 * hw + p] + spec.alpha * sb;
    }
}

// Neutral background: per-sample low-frequency waves plus pixel noise.
inline std::vector<double> base_image(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t s = spec.img_size, hw = s * s;
  std::vector<double> img(3 * hw);
  double fx = rng.uniform(0.1, 0.45), fy = rng.uniform(0.1, 0.45);
  double px = rng.uniform(0.0, 6.28), py = rng.uniform(0.0, 6.28);
  double tint[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                    rng.uniform(-0.05, 0.05)};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        double v = 0.45 + tint[c] +
                   0.08 * std::sin(fx * double(x) + px) +
                   0.08 * std::sin(fy * double(y) + py) +
                   spec.noise * rng.normal();
        img[c * hw + y * s + x] = v;
      }
  return img;
}

inline std::vector<unsigned char> quantize_image(
    const std::vector<double>& img) {
  std::vector<unsigned char> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = std::round(std::min(1.0, std::max(0.0, img[i])) * 255.0);
    out[i] = static_cast<unsigned char>(v);
  }
  return out;
}

// Renders a forced edit sequence over a base drawn from rng; planar bytes.
inline std::vector<unsigned char> render_sequence(
    const SyntheticSpec& spec, Rng& rng,
    const std::vector<std::size_t>& cls_seq) {
  auto img = base_image(spec, rng);
  for (std::size_t cls : cls_seq) paint_stamp(img, spec, cls);
  return quantize_image(img);
}

struct Sample {
  std::vector<unsigned char> planar_rgb;  // [3 * size * size], channel-major
  std::vector<int> tokens;                // forward-order class tokens (1..C)
};

// Deterministic per-index sample: length uniform on 0..min(5, classes),
// classes a random ordered subset without repetition.
inline Sample generate_sample(const SyntheticSpec& spec, std::uint64_t index) {
  Rng rng(mix64(spec.seed, index));
  std::size_t max_len = std::min<std::size_t>(kMaxSeqLen, spec.classes);
  std::size_t len = rng.uniform_int(max_len + 1);
  std::vector<std::size_t> pool(spec.classes);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  std::vector<std::size_t> cls_seq;
  for (std::size_t k = 0; k < len; ++k) {
    std::size_t j = rng.uniform_int(pool.size());
    cls_seq.push_back(pool[j]);
    pool.erase(pool.begin() + long(j));
  }
  Sample s;
  s.planar_rgb = render_sequence(spec, rng, cls_seq);
  for (std::size_t c : cls_seq) s.tokens.push_back(int(c) + 1);
  return s;
}

// ---------------------------------------------------------------------------
// disk format: binary 8-bit PPM images, name-per-line vocabulary, label and
// split-index text files

inline void write_ppm(const std::filesystem::path& path,
                      const std::vector<unsigned char>& planar,
                      std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << size << " " << size << "\n255\n";
  const std::size_t hw = size * size;
  std::vector<unsigned char> inter(3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) inter[p * 3 + c] = planar[c * hw + p];
  out.write(reinterpret_cast<const char*>(inter.data()),
            std::streamsize(inter.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<unsigned char> read_ppm(const std::filesystem::path& path,
                                           std::size_t expect_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255)
    throw IoError(path.string() + ": not an 8-bit P6 image");
  if (w != expect_size || h != expect_size)
    throw IoError(path.string() + ": unexpected dimensions");
  in.get();  // single whitespace after the header
  const std::size_t hw = w * h;
  std::vector<unsigned char> inter(3 * hw);
  in.read(reinterpret_cast<char*>(inter.data()), std::streamsize(inter.size()));
  if (std::size_t(in.gcount()) != inter.size())
    throw IoError(path.string() + ": truncated pixel data");
  std::vector<unsigned char> planar(3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) planar[c * hw + p] = inter[p * 3 + c];
  return planar;
}

inline std::string sample_id(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06llu",
                static_cast<unsigned long long>(index));
  return buf;
}

inline std::string join_names(const std::vector<int>& tokens,
                              const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    int t = tokens[i];
    if (t < 1 || std::size_t(t) > names.size())
      throw ContractError("token " + std::to_string(t) + " has no name");
    if (i) out += ",";
    out += names[std::size_t(t) - 1];
  }
  return out;
}

struct Dataset {
  std::size_t img_size = 0;
  std::vector<std::string> class_names;

  struct Item {
    std::string id;
    std::vector<unsigned char> planar_rgb;
    std::vector<int> tokens;  // forward order
  };
  std::vector<Item> train, val, test;

  std::size_t classes() const { return class_names.size(); }

  // [3,S,S] float tensor in [0,1]
  template <typename T>
  Tensor<T> image(const Item& item) const {
    auto t = Tensor<T>::zeros({3, img_size, img_size});
    auto& v = t.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = T(item.planar_rgb[i]) / T(255);
    return t;
  }
};

inline void generate_dataset(const SyntheticSpec& spec, std::size_t n_train,
                             std::size_t n_val, std::size_t n_test,
                             const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string());

  std::vector<std::string> names;
  for (std::size_t c = 0; c < spec.classes; ++c)
    names.push_back("edit" + std::to_string(c));
  {
    std::ofstream v(dir / "vocab.txt");
    if (!v) throw IoError("cannot write vocab.txt");
    for (const auto& n : names) v << n << "\n";
  }

  std::ofstream labels(dir / "labels.txt"), index(dir / "index.txt");
  if (!labels || !index) throw IoError("cannot write dataset metadata");
  const std::size_t total = n_train + n_val + n_test;
  for (std::size_t i = 0; i < total; ++i) {
    auto s = generate_sample(spec, i);
    auto id = sample_id(i);
    write_ppm(dir / "images" / (id + ".ppm"), s.planar_rgb, spec.img_size);
    labels << id << ": " << join_names(s.tokens, names) << "\n";
    const char* split =
        i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    index << id << " " << split << "\n";
  }
  std::ofstream meta(dir / "meta.txt");
  if (!meta) throw IoError("cannot write meta.txt");
  meta << "img_size = " << spec.img_size << "\n"
       << "classes = " << spec.classes << "\n"
       << "seed = " << spec.seed << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset ds;

  {
    std::ifstream meta(dir / "meta.txt");
    if (!meta) throw IoError("cannot read " + (dir / "meta.txt").string());
    std::string line;
    while (std::getline(meta, line)) {
      std::istringstream ls(line);
      std::string key, eq, value;
      if (ls >> key >> eq >> value && key == "img_size")
        ds.img_size = std::stoul(value);
    }
    if (ds.img_size == 0) throw IoError("meta.txt lacks img_size");
  }
  {
    std::ifstream v(dir / "vocab.txt");
    if (!v) throw IoError("cannot read vocab.txt");
    std::string name;
    while (std::getline(v, name))
      if (!name.empty()) ds.class_names.push_back(name);
  }
  std::map<std::string, int> token_of;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i)
    token_of[ds.class_names[i]] = int(i) + 1;

  std::map<std::string, std::vector<int>> labels;
  {
    std::ifstream l(dir / "labels.txt");
    if (!l) throw IoError("cannot read labels.txt");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(l, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto colon = line.find(':');
      if (colon == std::string::npos)
        throw IoError("labels.txt line " + std::to_string(lineno) +
                      ": expected 'id: names'");
      std::string id = line.substr(0, colon);
      std::string rest = line.substr(colon + 1);
      std::vector<int> toks;
      std::istringstream rs(rest);
      std::string name;
      while (std::getline(rs, name, ',')) {
        name.erase(0, name.find_first_not_of(" \t"));
        name.erase(name.find_last_not_of(" \t\r") + 1);
        if (name.empty()) continue;
        auto it = token_of.find(name);
        if (it == token_of.end())
          throw IoError("labels.txt line " + std::to_string(lineno) +
                        ": unknown class '" + name + "'");
        toks.push_back(it->second);
      }
      labels[id] = toks;
    }
  }

  std::ifstream index(dir / "index.txt");
  if (!index) throw IoError("cannot read index.txt");
  std::string id, split;
  while (index >> id >> split) {
    Dataset::Item item;
    item.id = id;
    item.planar_rgb = read_ppm(dir / "images" / (id + ".ppm"), ds.img_size);
    auto it = labels.find(id);
    if (it == labels.end()) throw IoError("no label for sample " + id);
    item.tokens = it->second;
    if (split == "train")
      ds.train.push_back(std::move(item));
    else if (split == "val")
      ds.val.push_back(std::move(item));
    else if (split == "test")
      ds.test.push_back(std::move(item));
    else
      throw IoError("unknown split '" + split + "' for sample " + id);
  }
  return ds;
}

}  // namespace seqdet
