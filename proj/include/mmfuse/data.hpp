#pragma once

// Corpus ingestion (CMU-MOSI-style directory layout), label reduction,
// middle-frame sampling, split manifests, the synthetic desk-scale dataset
// and batching into model inputs.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/backbones.hpp"
#include "mmfuse/errors.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

enum class Label : int { Negative = 0, NonNegative = 1 };

inline const char* to_string(Label l) { return l == Label::Negative ? "Negative" : "NonNegative"; }

/// Sentiment scores live on [-3, 3]; neutral counts as non-negative.
inline Label reduce_label(double score) {
  if (!(score >= -3.0 && score <= 3.0))
    throw ValidationError("sentiment score " + std::to_string(score) + " outside [-3, 3]");
  return score < 0.0 ? Label::Negative : Label::NonNegative;
}

inline std::size_t middle_index(std::size_t n) {
  if (n == 0) throw ValidationError("middle_frame: empty frame sequence");
  return n / 2;
}

template <typename Frame>
const Frame& middle_frame(const std::vector<Frame>& frames) {
  return frames[middle_index(frames.size())];
}

// ------------------------------------------------------------------ splits

struct SplitManifest {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
  std::array<double, 3> fractions{0.7, 0.15, 0.15};

  bool operator==(const SplitManifest&) const = default;
};

/// Split sizes by largest remainder: floor shares first, leftover items go to
/// the largest fractional parts (lower index wins ties).
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& fractions) {
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * fractions[i];
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

inline SplitManifest make_splits(const std::vector<std::string>& clip_ids, const std::array<double, 3>& fractions,
                                 std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ValidationError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  std::set<std::string> seen;
  for (const auto& id : clip_ids)
    if (!seen.insert(id).second) throw ValidationError("duplicate clip_id " + id);

  std::vector<std::string> ids = clip_ids;
  std::sort(ids.begin(), ids.end());  // input order must not matter
  Rng rng(seed);
  rng.shuffle(ids);
  const auto sizes = split_sizes(ids.size(), fractions);
  SplitManifest m;
  m.seed = seed;
  m.fractions = fractions;
  auto it = ids.begin();
  m.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  m.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  m.test.assign(it, ids.end());
  return m;
}

inline void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  if (!out) throw ValidationError("cannot write " + p.string());
  for (const auto& l : lines) out << l << '\n';
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

/// Writes train.txt / val.txt / test.txt (one clip_id per line) into `dir`.
inline void save_manifest(const SplitManifest& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_lines(dir / "train.txt", m.train);
  write_lines(dir / "val.txt", m.val);
  write_lines(dir / "test.txt", m.test);
}

inline SplitManifest load_manifest(const std::filesystem::path& dir) {
  SplitManifest m;
  m.train = read_lines(dir / "train.txt");
  m.val = read_lines(dir / "val.txt");
  m.test = read_lines(dir / "test.txt");
  return m;
}

// --------------------------------------------------------------- tokenizer

/// Lowercasing whitespace tokenizer; words map into the vocabulary by a fixed
/// FNV-1a hash. Output is [CLS] words... [SEP] padded to max_seq_len.
class Tokenizer {
 public:
  static constexpr std::int64_t kPad = 0, kCls = 1, kSep = 2, kUnk = 3, kFirstWord = 4;

  Tokenizer(std::size_t vocab_size, std::size_t max_seq_len) : vocab_(vocab_size), max_len_(max_seq_len) {
    if (vocab_size <= static_cast<std::size_t>(kFirstWord)) throw ConfigError("tokenizer: vocab too small");
    if (max_seq_len < 2) throw ConfigError("tokenizer: max_seq_len must be >= 2");
  }

  static std::vector<std::string> words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    for (std::string w; ss >> w;) {
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back(std::move(w));
    }
    return out;
  }

  std::int64_t word_id(const std::string& word) const {
    if (word.empty()) return kUnk;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : word) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return kFirstWord + static_cast<std::int64_t>(h % (vocab_ - static_cast<std::size_t>(kFirstWord)));
  }

  std::vector<std::int64_t> encode(const std::string& text) const {
    std::vector<std::int64_t> ids{kCls};
    for (const auto& w : words(text)) {
      if (ids.size() + 1 >= max_len_) break;
      ids.push_back(word_id(w));
    }
    ids.push_back(kSep);
    ids.resize(max_len_, kPad);
    return ids;
  }

  std::size_t max_seq_len() const { return max_len_; }

 private:
  std::size_t vocab_, max_len_;
};

// ----------------------------------------------------------------- images

/// 8-bit interleaved RGB image.
struct Image8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // HWC
};

inline Image8 read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open frame " + path.string());
  auto token = [&]() {
    std::string t;
    while (in >> std::ws && in.peek() == '#') std::getline(in, t);
    in >> t;
    return t;
  };
  if (token() != "P6") throw ValidationError(path.string() + ": not a binary PPM (P6)");
  Image8 img;
  std::size_t maxval = 0;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ValidationError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255 || img.width == 0 || img.height == 0)
    throw ValidationError(path.string() + ": unsupported PPM (need 8-bit, non-empty)");
  in.get();
  img.pixels.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw ValidationError(path.string() + ": truncated PPM");
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

struct NormalizeConfig {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.5, 0.5, 0.5};

  static NormalizeConfig imagenet() { return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}}; }

  float lo(std::size_t c) const { return static_cast<float>((0.0 - mean[c]) / std[c]); }
  float hi(std::size_t c) const { return static_cast<float>((1.0 - mean[c]) / std[c]); }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NormalizeConfig, mean, std)

/// Bilinear resize to res x res, then per-channel normalization. Output [3, res, res].
inline Tensor<float> to_model_image(const Image8& img, std::size_t res, const NormalizeConfig& norm) {
  Tensor<float> out({3, res, res});
  const double sx = static_cast<double>(img.width) / static_cast<double>(res);
  const double sy = static_cast<double>(img.height) / static_cast<double>(res);
  for (std::size_t y = 0; y < res; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < res; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return img.pixels[(yy * img.width + xx) * 3 + c] / 255.0; };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) + wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
        out[(c * res + y) * res + x] = static_cast<float>((v - norm.mean[c]) / norm.std[c]);
      }
    }
  }
  return out;
}

// ----------------------------------------------------------------- samples

struct Sample {
  std::string clip_id;
  double score = 0.0;
  Label label = Label::NonNegative;
  Tensor<float> image;                 // [C, H, W], normalized
  std::vector<std::int64_t> tokens;    // padded to max_seq_len
  std::vector<std::uint8_t> mask;      // 1 for real tokens

  bool operator==(const Sample& o) const {
    return clip_id == o.clip_id && score == o.score && label == o.label && image == o.image && tokens == o.tokens &&
           mask == o.mask;
  }
};

struct PreprocessConfig {
  std::size_t resolution = 32;
  std::size_t max_seq_len = 32;
  NormalizeConfig normalize;
};

/// Canonicalizes a sample: pixels clamped to the normalized range, the mask
/// re-derived from the tokens, the label re-derived from the score. Samples
/// produced by ingestion or synthesis are already canonical.
inline Sample preprocess(Sample s, const PreprocessConfig& cfg) {
  if (s.image.rank() != 3 || s.image.dim(0) != 3 || s.image.dim(1) != cfg.resolution || s.image.dim(2) != cfg.resolution)
    throw ShapeError("sample " + s.clip_id + ": image " + shape_str(s.image.shape()) + " does not match resolution " +
                     std::to_string(cfg.resolution));
  const std::size_t plane = cfg.resolution * cfg.resolution;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      auto& v = s.image[c * plane + i];
      v = std::clamp(v, cfg.normalize.lo(c), cfg.normalize.hi(c));
    }
  s.tokens.resize(cfg.max_seq_len, Tokenizer::kPad);
  s.mask.assign(cfg.max_seq_len, 0);
  for (std::size_t i = 0; i < cfg.max_seq_len; ++i) s.mask[i] = s.tokens[i] != Tokenizer::kPad ? 1 : 0;
  s.label = reduce_label(s.score);
  return s;
}

// ------------------------------------------------------------------ corpus

/// One clip in the corpus directory: frames are file paths in temporal order.
struct RawClip {
  std::string clip_id;
  std::vector<std::filesystem::path> frames;
  std::string transcript;
  double score = 0.0;
};

struct CorpusReport {
  std::vector<RawClip> clips;
  std::vector<std::string> errors;  // one entry per malformed clip
};

/// Reads `<root>/labels.csv` (header `clip_id,score`), `<root>/transcripts/<id>.txt`
/// and `<root>/frames/<id>/*.ppm` (sorted by file name).
inline CorpusReport scan_corpus(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  CorpusReport rep;
  std::ifstream labels(root / "labels.csv");
  if (!labels) throw ValidationError("corpus: missing " + (root / "labels.csv").string());
  std::string line;
  std::getline(labels, line);
  if (line.rfind("clip_id,score", 0) != 0) throw ValidationError("corpus: labels.csv header must be 'clip_id,score'");
  std::set<std::string> seen;
  for (std::size_t row = 2; std::getline(labels, line); ++row) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      rep.errors.push_back("labels.csv row " + std::to_string(row) + ": expected clip_id,score");
      continue;
    }
    RawClip clip;
    clip.clip_id = line.substr(0, comma);
    const std::string id = clip.clip_id;
    try {
      std::size_t used = 0;
      clip.score = std::stod(line.substr(comma + 1), &used);
      reduce_label(clip.score);
    } catch (const std::exception& e) {
      rep.errors.push_back(id + ": bad score (" + e.what() + ")");
      continue;
    }
    if (!seen.insert(id).second) {
      rep.errors.push_back(id + ": duplicate clip_id");
      continue;
    }
    const auto tpath = root / "transcripts" / (id + ".txt");
    std::ifstream t(tpath);
    if (!t) {
      rep.errors.push_back(id + ": missing transcript " + tpath.string());
      continue;
    }
    std::ostringstream ss;
    ss << t.rdbuf();
    clip.transcript = ss.str();
    const auto fdir = root / "frames" / id;
    if (fs::is_directory(fdir))
      for (const auto& e : fs::directory_iterator(fdir))
        if (e.path().extension() == ".ppm") clip.frames.push_back(e.path());
    std::sort(clip.frames.begin(), clip.frames.end());
    if (clip.frames.empty()) {
      rep.errors.push_back(id + ": no .ppm frames under " + fdir.string());
      continue;
    }
    rep.clips.push_back(std::move(clip));
  }
  std::sort(rep.clips.begin(), rep.clips.end(), [](const RawClip& a, const RawClip& b) { return a.clip_id < b.clip_id; });
  return rep;
}

inline Sample ingest_clip(const RawClip& clip, const Tokenizer& tok, const PreprocessConfig& cfg) {
  Sample s;
  s.clip_id = clip.clip_id;
  s.score = clip.score;
  s.image = to_model_image(read_ppm(middle_frame(clip.frames)), cfg.resolution, cfg.normalize);
  s.tokens = tok.encode(clip.transcript);
  return preprocess(std::move(s), cfg);
}

// ---------------------------------------------------------------- synthetic

/// Planted-rule generator. Each sample pairs a text level t in {-3,-1,1,3}
/// (a sentiment word among random filler) with an image level v in {-2,2}
/// (colour of a noisy square patch). The label is NonNegative iff t + v >= 0,
/// so either modality alone tops out near 75% while both together decide it.
/// Every transcript is shared by four clips, two per image level, so a
/// text-only model cannot beat the rule by memorizing sentences.
struct SynthConfig {
  std::size_t max_seq_len = 32;
  std::size_t vocab_size = 1000;
  std::size_t resolution = 32;
  std::size_t min_words = 6, max_words = 14;
  std::size_t synonyms = 3;  // sentiment words per text level, 1..3
  std::size_t patch = 10;
  double pixel_noise = 0.1;
  NormalizeConfig normalize;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, max_seq_len, vocab_size, resolution, min_words, max_words,
                                                synonyms, patch, pixel_noise, normalize)

namespace detail {
inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w{
      "the",   "movie", "was",   "and",    "it",    "i",     "think",  "that", "plot",   "actor", "scene",
      "story", "just",  "really", "kind",  "of",    "this",  "one",    "film", "a",      "with",  "some",
      "music", "ending", "then",  "there", "is",    "you",   "know",   "like", "watched", "when", "people"};
  return w;
}
// Synonym sets per text level, index 0..3 for t = -3, -1, +1, +3.
inline const std::array<std::vector<std::string>, 4>& sentiment_words() {
  static const std::array<std::vector<std::string>, 4> w{{{"terrible", "awful", "horrible"},
                                                          {"dull", "weak", "meh"},
                                                          {"decent", "fine", "okay"},
                                                          {"brilliant", "amazing", "superb"}}};
  return w;
}

inline std::vector<std::int64_t> synth_transcript(int level, const SynthConfig& cfg, const Tokenizer& tok, Rng& rng) {
  const auto& fill = filler_words();
  const std::size_t nwords = cfg.min_words + rng.below(cfg.max_words - cfg.min_words + 1);
  std::vector<std::string> words;
  for (std::size_t w = 0; w < nwords; ++w) words.push_back(fill[rng.below(fill.size())]);
  const auto& syn = sentiment_words()[static_cast<std::size_t>((level + 3) / 2)];
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)), syn[rng.below(std::min(cfg.synonyms, syn.size()))]);
  std::string text;
  for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
  return tok.encode(text);
}

// Gray noisy background, one coloured square: warm for v = +2, cool for v = -2.
inline Image8 synth_frame(int level, const SynthConfig& cfg, Rng& rng) {
  const std::size_t R = cfg.resolution, P = cfg.patch;
  Image8 img{R, R, std::vector<std::uint8_t>(R * R * 3)};
  const std::size_t py = rng.below(R - P + 1), px = rng.below(R - P + 1);
  const double warm[3] = {0.9, 0.55, 0.1}, cool[3] = {0.1, 0.45, 0.9};
  const double* colour = level > 0 ? warm : cool;
  for (std::size_t y = 0; y < R; ++y)
    for (std::size_t x = 0; x < R; ++x) {
      const bool inside = y >= py && y < py + P && x >= px && x < px + P;
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = inside ? colour[c] : 0.5;
        const double v = std::clamp(base + cfg.pixel_noise * rng.normal(), 0.0, 1.0);
        img.pixels[(y * R + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  return img;
}
}  // namespace detail

struct SynthLatent {
  int text_level;   // -3, -1, 1, 3
  int image_level;  // -2, 2
};

inline std::vector<Sample> synth_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& cfg = {},
                                         std::vector<SynthLatent>* latents = nullptr) {
  if (n == 0) throw ValidationError("synth_dataset: n must be >= 1");
  if (cfg.patch == 0 || cfg.patch > cfg.resolution) throw ConfigError("synth: patch must fit inside the image");
  if (cfg.min_words > cfg.max_words) throw ConfigError("synth: min_words must be <= max_words");
  if (cfg.synonyms == 0 || cfg.synonyms > 3) throw ConfigError("synth: synonyms must be in 1..3");
  Tokenizer tok(cfg.vocab_size, cfg.max_seq_len);
  PreprocessConfig pcfg{cfg.resolution, cfg.max_seq_len, cfg.normalize};
  // A cycle of 16 clips over four transcripts (slot 0..3 with levels 3, -3, 1, -1).
  // Labels alternate along the cycle, so any prefix is balanced within one.
  struct Slot {
    std::size_t transcript;
    int image_level;
  };
  static const Slot cycle[16] = {{0, 2}, {1, 2}, {0, -2}, {1, -2}, {0, 2}, {1, 2}, {0, -2}, {1, -2},
                                 {2, 2}, {2, -2}, {2, 2}, {2, -2}, {3, 2}, {3, -2}, {3, 2}, {3, -2}};
  static const int text_levels[4] = {3, -3, 1, -1};
  Rng rng(seed);
  std::vector<Sample> out;
  std::vector<SynthLatent> lat;
  out.reserve(n);
  std::array<std::vector<std::int64_t>, 4> transcripts;
  for (std::size_t i = 0; i < n; ++i) {
    const Slot slot = cycle[i % 16];
    const SynthLatent z{text_levels[slot.transcript], slot.image_level};
    auto& transcript = transcripts[slot.transcript];
    if (i % 16 == 0) for (auto& t : transcripts) t.clear();
    if (transcript.empty()) transcript = detail::synth_transcript(z.text_level, cfg, tok, rng);
    Sample s;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%06zu", i);
    s.clip_id = id;
    s.score = 0.6 * (z.text_level + z.image_level);
    s.tokens = transcript;
    s.image = to_model_image(detail::synth_frame(z.image_level, cfg, rng), cfg.resolution, cfg.normalize);
    out.push_back(preprocess(std::move(s), pcfg));
    lat.push_back(z);
  }
  // Shuffle so class order carries no information, keeping latents aligned.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<Sample> shuffled;
  std::vector<SynthLatent> shuffled_lat;
  for (auto p : perm) {
    shuffled.push_back(std::move(out[p]));
    shuffled_lat.push_back(lat[p]);
  }
  if (latents) *latents = std::move(shuffled_lat);
  return shuffled;
}

// ------------------------------------------------------------ serialization

namespace detail {
template <typename V>
void put(std::ostream& o, const V& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError("file truncated");
  return v;
}
}  // namespace detail

inline constexpr std::uint32_t kSampleFileVersion = 1;

/// Binary sample container ("MMFS"). Lossless for every field.
inline void save_samples(std::ostream& o, const std::vector<Sample>& samples) {
  o.write("MMFS", 4);
  detail::put(o, kSampleFileVersion);
  detail::put(o, static_cast<std::uint64_t>(samples.size()));
  for (const auto& s : samples) {
    detail::put(o, static_cast<std::uint32_t>(s.clip_id.size()));
    o.write(s.clip_id.data(), static_cast<std::streamsize>(s.clip_id.size()));
    detail::put(o, s.score);
    detail::put(o, static_cast<std::int32_t>(s.label));
    detail::put(o, static_cast<std::uint32_t>(s.image.rank()));
    for (auto d : s.image.shape()) detail::put(o, static_cast<std::uint64_t>(d));
    o.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    detail::put(o, static_cast<std::uint64_t>(s.tokens.size()));
    o.write(reinterpret_cast<const char*>(s.tokens.data()), static_cast<std::streamsize>(s.tokens.size() * sizeof(std::int64_t)));
    o.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
  }
}

inline std::vector<Sample> load_samples(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "MMFS") throw FormatError("not a sample file");
  if (detail::get<std::uint32_t>(in) != kSampleFileVersion) throw FormatError("unsupported sample file version");
  const auto n = detail::get<std::uint64_t>(in);
  std::vector<Sample> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    s.clip_id.resize(detail::get<std::uint32_t>(in));
    in.read(s.clip_id.data(), static_cast<std::streamsize>(s.clip_id.size()));
    s.score = detail::get<double>(in);
    s.label = static_cast<Label>(detail::get<std::int32_t>(in));
    Shape shape(detail::get<std::uint32_t>(in));
    for (auto& d : shape) d = detail::get<std::uint64_t>(in);
    s.image = Tensor<float>(shape);
    in.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    s.tokens.resize(detail::get<std::uint64_t>(in));
    in.read(reinterpret_cast<char*>(s.tokens.data()), static_cast<std::streamsize>(s.tokens.size() * sizeof(std::int64_t)));
    s.mask.resize(s.tokens.size());
    in.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
    if (!in) throw FormatError("sample file truncated");
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_samples(const std::filesystem::path& p, const std::vector<Sample>& samples) {
  std::ofstream o(p, std::ios::binary);
  if (!o) throw ValidationError("cannot write " + p.string());
  save_samples(o, samples);
}

inline std::vector<Sample> load_samples(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string() + " (run `mmfuse prep` first)");
  return load_samples(in);
}

// ---------------------------------------------------------------- batching

template <typename T>
struct Batch {
  Inputs<T> inputs;
  std::vector<int> labels;
};

template <typename T>
Batch<T> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ValidationError("make_batch: empty index list");
  const auto& first = samples.at(idx[0]);
  const std::size_t L = first.tokens.size(), C = first.image.dim(0), H = first.image.dim(1), W = first.image.dim(2);
  Batch<T> b;
  b.inputs.batch = idx.size();
  b.inputs.seq_len = L;
  b.inputs.tokens.reserve(idx.size() * L);
  b.inputs.mask.reserve(idx.size() * L);
  b.inputs.image = Tensor<T>({idx.size(), C, H, W});
  const std::size_t plane = C * H * W;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& s = samples.at(idx[k]);
    if (s.tokens.size() != L || s.image.size() != plane) throw ShapeError("make_batch: samples differ in shape");
    b.inputs.tokens.insert(b.inputs.tokens.end(), s.tokens.begin(), s.tokens.end());
    for (auto m : s.mask) b.inputs.mask.push_back(static_cast<T>(m));
    for (std::size_t i = 0; i < plane; ++i) b.inputs.image[k * plane + i] = static_cast<T>(s.image[i]);
    b.labels.push_back(static_cast<int>(s.label));
  }
  return b;
}

template <typename T>
Batch<T> make_batch(const std::vector<Sample>& samples) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch<T>(samples, idx);
}

/// Samples whose clip_id is listed, in list order.
inline std::vector<Sample> select_samples(const std::vector<Sample>& all, const std::vector<std::string>& ids) {
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : all) by_id[s.clip_id] = &s;
  std::vector<Sample> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("manifest lists unknown clip_id " + id);
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace mmfuse
