#include "twig/weights_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "twig/error.hpp"

namespace twig {

namespace {

constexpr std::array<char, 4> kMagic{'T', 'W', 'G', '1'};
constexpr std::array<char, 4> kTwigTag{'t', 'w', 'i', 'g'};

class Writer {
 public:
  void tag(const std::array<char, 4>& t) { bytes_.insert(bytes_.end(), t.begin(), t.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  void f64(std::span<const double> values) {
    for (double v : values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xffU));
    }
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  bool at_end() const { return offset_ == bytes_.size(); }
  std::array<char, 4> tag() {
    need(4);
    std::array<char, 4> t{};
    std::memcpy(t.data(), bytes_.data() + offset_, 4);
    offset_ += 4;
    return t;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[offset_++])) << (8 * i);
    return v;
  }
  void f64(std::span<double> out) {
    need(8 * out.size());
    for (double& v : out) {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[offset_++])) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - offset_ < n) throw IoError("weights file truncated");
  }
  std::vector<char> bytes_;
  std::size_t offset_ = 0;
};

void write_norm(Writer& w, const LayerNormParams& p) {
  w.f64(p.scale);
  w.f64(p.bias);
}

void write_layer(Writer& w, const LayerWeights& l) {
  for (const Matrix* m : {&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ffn_in, &l.ffn_out}) w.f64(m->flat());
  write_norm(w, l.attn_norm);
  write_norm(w, l.ffn_norm);
}

LayerNormParams read_norm(Reader& r, std::size_t d) {
  LayerNormParams p{std::vector<double>(d), std::vector<double>(d)};
  r.f64(p.scale);
  r.f64(p.bias);
  return p;
}

Matrix read_matrix(Reader& r, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  r.f64(m.flat());
  return m;
}

LayerWeights read_layer(Reader& r, const ModelConfig& cfg) {
  const std::size_t d = cfg.hidden_dim;
  LayerWeights l;
  l.w_q = read_matrix(r, d, d);
  l.w_k = read_matrix(r, d, d);
  l.w_v = read_matrix(r, d, d);
  l.w_o = read_matrix(r, d, d);
  l.ffn_in = read_matrix(r, d, cfg.ffn_dim);
  l.ffn_out = read_matrix(r, cfg.ffn_dim, d);
  l.attn_norm = read_norm(r, d);
  l.ffn_norm = read_norm(r, d);
  return l;
}

}  // namespace

void save_weights(const std::string& path, const Model& model, const TwigModel* twig) {
  Writer w;
  w.tag(kMagic);
  const auto& c = model.config;
  for (auto v : {c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_positions}) w.u32(v);
  w.f64(model.embedding.flat());
  w.f64(model.positional.flat());
  for (const auto& layer : model.layers) write_layer(w, layer);
  write_norm(w, model.final_norm);
  w.f64(model.head.flat());
  if (twig) {
    w.tag(kTwigTag);
    w.u32(twig->config.trunk_depth);
    w.u32(twig->config.num_layers);
    w.u32(static_cast<std::uint32_t>(twig->config.init));
    for (const auto& layer : twig->layers) write_layer(w, layer);
    write_norm(w, twig->final_norm);
    w.f64(twig->head.flat());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

LoadedWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
  if (r.tag() != kMagic) throw IoError("'" + path + "' is not a TWG1 file");

  auto model = std::make_shared<Model>();
  auto& c = model->config;
  c.num_layers = r.u32();
  c.hidden_dim = r.u32();
  c.num_heads = r.u32();
  c.ffn_dim = r.u32();
  c.vocab_size = r.u32();
  c.max_positions = r.u32();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("invalid header: ") + e.what());
  }
  const std::size_t d = c.hidden_dim;
  model->embedding = read_matrix(r, c.vocab_size, d);
  model->positional = read_matrix(r, c.max_positions, d);
  for (std::uint32_t l = 0; l < c.num_layers; ++l) model->layers.push_back(read_layer(r, c));
  model->final_norm = read_norm(r, d);
  model->head = read_matrix(r, d, c.vocab_size);

  LoadedWeights out;
  if (!r.at_end()) {
    if (r.tag() != kTwigTag) throw IoError("unknown section in '" + path + "'");
    TwigModel tm;
    tm.config.trunk_depth = r.u32();
    tm.config.num_layers = r.u32();
    const std::uint32_t init = r.u32();
    if (init > 2) throw IoError("invalid twig init tag");
    tm.config.init = static_cast<TwigInit>(init);
    try {
      tm.config.validate(c);
    } catch (const ConfigError& e) {
      throw IoError(std::string("invalid twig section: ") + e.what());
    }
    for (std::uint32_t t = 0; t < tm.config.num_layers; ++t) tm.layers.push_back(read_layer(r, c));
    tm.final_norm = read_norm(r, d);
    tm.head = read_matrix(r, d, c.vocab_size);
    if (!r.at_end()) throw IoError("trailing bytes in '" + path + "'");
    out.twig = std::move(tm);
  }
  out.base = model;
  if (out.twig) out.twig->base = out.base;
  return out;
}

}  // namespace twig
