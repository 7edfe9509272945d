#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mesa/analyze.hpp"

namespace mesa {

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

// ---------------------------------------------------------------------------
// Atomic file output: write a sibling temp file, then rename over the target.

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Named-tensor container.
//
//   "MESA" | u32 version | u32 count | entries
//   entry: u32 name_len | name bytes | u32 rank | u32 dims[rank] |
//          u8 dtype (0 = f64, 1 = f32) | row-major payload

inline constexpr char kContainerMagic[4] = {'M', 'E', 'S', 'A'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { kF64 = 0, kF32 = 1 };

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  DType dtype = DType::kF64;
  std::vector<double> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

using TensorList = std::vector<Tensor>;

inline Tensor tensor_from_matrix(const std::string& name, const Matrix& m, DType dt = DType::kF64) {
  return {name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, dt,
          {m.data().begin(), m.data().end()}};
}

inline Matrix tensor_to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw IoError("tensor " + t.name + " is not rank 2");
  Matrix m(t.dims[0], t.dims[1]);
  std::copy(t.data.begin(), t.data.end(), m.data().begin());
  return m;
}

// Stacks equally shaped matrices into a batch x rows x cols tensor.
inline Tensor tensor_from_batch(const std::string& name, const std::vector<Matrix>& batch) {
  if (batch.empty()) throw IoError("cannot store an empty batch as " + name);
  Tensor t{name,
           {static_cast<std::uint32_t>(batch.size()), static_cast<std::uint32_t>(batch[0].rows()),
            static_cast<std::uint32_t>(batch[0].cols())},
           DType::kF64,
           {}};
  for (const auto& m : batch) {
    if (!m.same_shape(batch[0])) throw ShapeMismatch("batch entries differ in shape");
    t.data.insert(t.data.end(), m.data().begin(), m.data().end());
  }
  return t;
}

inline std::vector<Matrix> tensor_to_batch(const Tensor& t) {
  if (t.dims.size() != 3) throw IoError("tensor " + t.name + " is not rank 3");
  std::vector<Matrix> out;
  const std::size_t per = static_cast<std::size_t>(t.dims[1]) * t.dims[2];
  for (std::size_t b = 0; b < t.dims[0]; ++b) {
    Matrix m(t.dims[1], t.dims[2]);
    std::copy(t.data.begin() + b * per, t.data.begin() + (b + 1) * per, m.data().begin());
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw IoError("container truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_container(const TensorList& tensors) {
  std::set<std::string> names;
  std::string out(kContainerMagic, 4);
  detail::put<std::uint32_t>(out, kContainerVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor& t : tensors) {
    if (!names.insert(t.name).second) throw IoError("duplicate tensor name " + t.name);
    if (t.data.size() != t.numel()) throw IoError("tensor " + t.name + " payload size mismatch");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint32_t>(out, d);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    for (double v : t.data) {
      if (t.dtype == DType::kF64) {
        detail::put<double>(out, v);
      } else {
        detail::put<float>(out, static_cast<float>(v));
      }
    }
  }
  return out;
}

inline TensorList parse_container(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.str(4) != std::string(kContainerMagic, 4)) throw IoError("bad container magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) throw IoError("unsupported container version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  TensorList out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = r.str(r.get<std::uint32_t>());
    if (!names.insert(t.name).second) throw IoError("duplicate tensor name " + t.name);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) t.dims.push_back(r.get<std::uint32_t>());
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) throw IoError("unknown dtype tag " + std::to_string(tag));
    t.dtype = static_cast<DType>(tag);
    t.data.resize(t.numel());
    for (double& v : t.data) v = t.dtype == DType::kF64 ? r.get<double>() : r.get<float>();
    out.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("trailing bytes after container entries");
  return out;
}

inline void save_container(const std::filesystem::path& path, const TensorList& tensors) {
  write_file_atomic(path, serialize_container(tensors));
}

inline TensorList load_container(const std::filesystem::path& path) {
  return parse_container(read_file(path));
}

inline const Tensor& find_tensor(const TensorList& list, const std::string& name) {
  for (const auto& t : list) {
    if (t.name == name) return t;
  }
  throw IoError("tensor " + name + " not found");
}

// ---------------------------------------------------------------------------
// Checkpoints: parameters plus optimizer moments and step counter.

inline TensorList checkpoint_tensors(const TrainState& st) {
  TensorList out;
  for (const auto& [name, m] : st.params) out.push_back(tensor_from_matrix(name, m));
  for (const auto& [name, m] : st.opt.m) out.push_back(tensor_from_matrix("opt.m/" + name, m));
  for (const auto& [name, m] : st.opt.v) out.push_back(tensor_from_matrix("opt.v/" + name, m));
  out.push_back(tensor_from_matrix("opt.step", Matrix(1, 1, static_cast<double>(st.opt.step))));
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  save_container(path, checkpoint_tensors(st));
}

// Loads and checks against the architecture; any disagreement is a
// CheckpointMismatch.
inline TrainState load_checkpoint(const std::filesystem::path& path, const TransformerConfig& arch) {
  TrainState st;
  bool has_step = false;
  for (const Tensor& t : load_container(path)) {
    if (t.name == "opt.step") {
      st.opt.step = static_cast<std::size_t>(t.data.at(0));
      has_step = true;
    } else if (t.name.rfind("opt.m/", 0) == 0) {
      st.opt.m[t.name.substr(6)] = tensor_to_matrix(t);
    } else if (t.name.rfind("opt.v/", 0) == 0) {
      st.opt.v[t.name.substr(6)] = tensor_to_matrix(t);
    } else {
      st.params[t.name] = tensor_to_matrix(t);
    }
  }
  try {
    check_params(st.params, arch);
  } catch (const ShapeMismatch& e) {
    throw CheckpointMismatch(path.string() + ": " + e.what());
  }
  if (!has_step || st.opt.m.size() != st.params.size() || st.opt.v.size() != st.params.size()) {
    throw CheckpointMismatch(path.string() + ": optimizer state incomplete");
  }
  return st;
}

// ---------------------------------------------------------------------------
// CSV with a mandatory header and 17 significant digits.

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(const std::vector<std::string>& cells) {
    if (cells.size() != header_.size()) throw IoError("CSV row width does not match header");
    rows_.push_back(cells);
  }
  void add_row(const std::vector<double>& values) {
    std::vector<std::string> cells;
    for (double v : values) cells.push_back(format_double(v));
    add_row(cells);
  }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, str()); }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline CsvTable parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  if (!std::getline(in, line)) throw IoError("CSV is missing its header");
  CsvTable t(split(line));
  while (std::getline(in, line)) {
    if (!line.empty()) t.add_row(split(line));
  }
  return t;
}

inline const std::vector<std::string> kMetricsHeader = {"step",       "lr",        "train_loss",
                                                        "eval_loss",  "grad_norm", "wallclock_s"};

inline CsvTable metrics_table(const std::vector<MetricsRow>& log) {
  CsvTable t(kMetricsHeader);
  for (const auto& r : log) {
    t.add_row(std::vector<std::string>{std::to_string(r.step), format_double(r.lr),
                                       format_double(r.train_loss), format_double(r.eval_loss),
                                       format_double(r.grad_norm), format_double(r.wallclock_s)});
  }
  return t;
}

inline std::vector<MetricsRow> parse_metrics(const CsvTable& t) {
  if (t.header() != kMetricsHeader) throw IoError("unexpected metrics header");
  std::vector<MetricsRow> out;
  for (const auto& c : t.rows()) {
    out.push_back({std::stoull(c[0]), std::stod(c[1]), std::stod(c[2]), std::stod(c[3]),
                   std::stod(c[4]), std::stod(c[5])});
  }
  return out;
}

// Population mean and standard deviation per logged step across seeds.
inline CsvTable aggregate_metrics(const std::vector<std::vector<MetricsRow>>& runs) {
  CsvTable t({"step", "n_seeds", "train_loss_mean", "train_loss_std", "eval_loss_mean",
              "eval_loss_std"});
  if (runs.empty()) return t;
  for (std::size_t i = 0; i < runs[0].size(); ++i) {
    const std::size_t step = runs[0][i].step;
    std::vector<double> tr, ev;
    for (const auto& r : runs) {
      if (i < r.size() && r[i].step == step) {
        tr.push_back(r[i].train_loss);
        ev.push_back(r[i].eval_loss);
      }
    }
    auto stats = [](const std::vector<double>& v) {
      double m = 0.0, s = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      for (double x : v) s += (x - m) * (x - m);
      return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
    };
    const auto [trm, trs] = stats(tr);
    const auto [evm, evs] = stats(ev);
    t.add_row(std::vector<std::string>{std::to_string(step), std::to_string(tr.size()),
                                       format_double(trm), format_double(trs), format_double(evm),
                                       format_double(evs)});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Experiment configuration (strict JSON schema).

using Json = nlohmann::ordered_json;

struct AnalysisRequest {
  std::string kind;  // probe | icl | distill | maps | sensitivity | prompt
  // probe
  ProbeKind probe = ProbeKind::kToken;
  std::vector<std::size_t> layers{0};
  std::size_t t = 10;
  std::vector<std::size_t> lags{0, 1, 2, 3};
  std::vector<std::size_t> t_grid{2, 10, 20, 40};
  double lambda = 1.0;
  double reg = kProbeRidge;
  std::size_t batch = 512;
  // icl / prompt
  IclVariant variant = IclVariant::kPlain;
  std::size_t n_pairs = 20;
  std::size_t tasks = 256;
  std::string tokens_file;
  std::size_t steps = 5000;
  double lr = 1e-2;
  // distill
  std::size_t layer = 0;
  std::size_t batch_size = 32;
  std::size_t train_sequences = 256;
  std::size_t eval_sequences = 256;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "runs";
  std::size_t gen_batch = 256;
  TrainConfig train;  // carries task, encoding and arch
  std::vector<AnalysisRequest> analyses;
};

namespace detail {

inline void check_keys(const Json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!j.at(key).is_number_unsigned()) throw ConfigError("");
    }
    out = j.at(key).get<T>();
  } catch (const std::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

inline void read_opt(const Json& j, const char* key, std::optional<double>& out,
                     const std::string& where) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  double v = 0.0;
  read(j, key, v, where);
  out = v;
}

inline Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

template <typename E, typename Parse>
void read_enum(const Json& j, const char* key, E& out, const std::string& where, Parse&& parse) {
  if (!j.contains(key)) return;
  std::string s;
  read(j, key, s, where);
  try {
    out = parse(s);
  } catch (const Error& e) {
    throw ConfigError(std::string(e.what()) + " in " + where);
  }
}

inline const char* positional_name(Positional p) {
  return p == Positional::kNone ? "none" : "first_layer_concat";
}
inline Positional parse_positional(const std::string& s) {
  if (s == "none") return Positional::kNone;
  if (s == "first_layer_concat") return Positional::kFirstLayerConcat;
  throw InvalidSpec("unknown positional mode '" + s + "'");
}
inline const char* readout_name(Readout r) {
  return r == Readout::kFirstDims ? "first_dims" : "output_embedding";
}
inline Readout parse_readout(const std::string& s) {
  if (s == "first_dims") return Readout::kFirstDims;
  if (s == "output_embedding") return Readout::kOutputEmbedding;
  throw InvalidSpec("unknown readout '" + s + "'");
}
inline ProbeKind parse_probe_kind(const std::string& s) {
  for (auto k : {ProbeKind::kToken, ProbeKind::kTarget, ProbeKind::kPrecond}) {
    if (s == probe_kind_name(k)) return k;
  }
  throw InvalidSpec("unknown probe kind '" + s + "'");
}

}  // namespace detail

inline Json to_json(const GeneratorSpec& s) {
  return {{"kind", generator_kind_name(s.kind)}, {"n_h", s.n_h},         {"n_s", s.n_s},
          {"n_m", s.n_m},                         {"sigma_h", s.sigma_h}, {"sigma_s", s.sigma_s},
          {"T", s.T},                             {"clip_band", detail::opt_json(s.clip_band)}};
}

inline GeneratorSpec generator_from_json(const Json& j) {
  const std::string w = "task";
  detail::check_keys(j, w, {"kind", "n_h", "n_s", "n_m", "sigma_h", "sigma_s", "T", "clip_band"});
  GeneratorSpec s;
  detail::read_enum(j, "kind", s.kind, w, parse_generator_kind);
  detail::read(j, "n_h", s.n_h, w);
  detail::read(j, "n_s", s.n_s, w);
  detail::read(j, "n_m", s.n_m, w);
  detail::read(j, "sigma_h", s.sigma_h, w);
  detail::read(j, "sigma_s", s.sigma_s, w);
  detail::read(j, "T", s.T, w);
  detail::read_opt(j, "clip_band", s.clip_band, w);
  return s;
}

inline Json to_json(const TransformerConfig& c) {
  Json layers = Json::array();
  for (auto k : c.layers) layers.push_back(attention_kind_name(k));
  return {{"layers", layers},
          {"heads", c.heads},
          {"key_size", c.key_size},
          {"value_size", c.value_size},
          {"token_dim", c.token_dim},
          {"embed_dim", c.embed_dim},
          {"use_mlp", c.use_mlp},
          {"mlp_hidden", c.mlp_hidden},
          {"use_layernorm", c.use_layernorm},
          {"positional", detail::positional_name(c.positional)},
          {"pos_dim", c.pos_dim},
          {"activation_clip", detail::opt_json(c.activation_clip)},
          {"readout", detail::readout_name(c.readout)},
          {"readout_dim", c.readout_dim},
          {"qk_normalize", c.qk_normalize},
          {"init_std", c.init_std}};
}

inline TransformerConfig arch_from_json(const Json& j) {
  const std::string w = "arch";
  detail::check_keys(j, w,
                     {"layers", "heads", "key_size", "value_size", "token_dim", "embed_dim",
                      "use_mlp", "mlp_hidden", "use_layernorm", "positional", "pos_dim",
                      "activation_clip", "readout", "readout_dim", "qk_normalize", "init_std"});
  TransformerConfig c;
  if (j.contains("layers")) {
    std::vector<std::string> names;
    detail::read(j, "layers", names, w);
    for (const auto& n : names) {
      try {
        c.layers.push_back(parse_attention_kind(n));
      } catch (const Error& e) {
        throw ConfigError(std::string(e.what()) + " in arch");
      }
    }
  }
  detail::read(j, "heads", c.heads, w);
  detail::read(j, "key_size", c.key_size, w);
  detail::read(j, "value_size", c.value_size, w);
  detail::read(j, "token_dim", c.token_dim, w);
  detail::read(j, "embed_dim", c.embed_dim, w);
  detail::read(j, "use_mlp", c.use_mlp, w);
  detail::read(j, "mlp_hidden", c.mlp_hidden, w);
  detail::read(j, "use_layernorm", c.use_layernorm, w);
  detail::read_enum(j, "positional", c.positional, w, detail::parse_positional);
  detail::read(j, "pos_dim", c.pos_dim, w);
  detail::read_opt(j, "activation_clip", c.activation_clip, w);
  detail::read_enum(j, "readout", c.readout, w, detail::parse_readout);
  detail::read(j, "readout_dim", c.readout_dim, w);
  detail::read(j, "qk_normalize", c.qk_normalize, w);
  detail::read(j, "init_std", c.init_std, w);
  return c;
}

inline Json train_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"warmup_steps", c.warmup_steps},
          {"cosine_steps", c.cosine_steps},
          {"final_lr", c.final_lr},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"eval_every", c.eval_every},
          {"eval_batch", c.eval_batch},
          {"log_wallclock", c.log_wallclock}};
}

inline void train_from_json(const Json& j, TrainConfig& c) {
  const std::string w = "train";
  detail::check_keys(j, w,
                     {"steps", "batch_size", "peak_lr", "warmup_steps", "cosine_steps", "final_lr",
                      "weight_decay", "grad_clip_norm", "beta1", "beta2", "eps", "eval_every",
                      "eval_batch", "log_wallclock"});
  detail::read(j, "steps", c.steps, w);
  detail::read(j, "batch_size", c.batch_size, w);
  detail::read(j, "peak_lr", c.peak_lr, w);
  detail::read(j, "warmup_steps", c.warmup_steps, w);
  detail::read(j, "cosine_steps", c.cosine_steps, w);
  detail::read(j, "final_lr", c.final_lr, w);
  detail::read(j, "weight_decay", c.weight_decay, w);
  detail::read(j, "grad_clip_norm", c.grad_clip_norm, w);
  detail::read(j, "beta1", c.beta1, w);
  detail::read(j, "beta2", c.beta2, w);
  detail::read(j, "eps", c.eps, w);
  detail::read(j, "eval_every", c.eval_every, w);
  detail::read(j, "eval_batch", c.eval_batch, w);
  detail::read(j, "log_wallclock", c.log_wallclock, w);
}

inline Json to_json(const TokenEncoding& e) { return {{"kind", encoding_name(e.kind)}, {"k", e.k}}; }

inline TokenEncoding encoding_from_json(const Json& j) {
  detail::check_keys(j, "encoding", {"kind", "k"});
  TokenEncoding e;
  detail::read_enum(j, "kind", e.kind, "encoding", parse_encoding);
  detail::read(j, "k", e.k, "encoding");
  return e;
}

inline const std::set<std::string>& analysis_keys(const std::string& kind) {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"probe", {"kind", "probe", "layers", "t", "lags", "t_grid", "lambda", "reg", "batch"}},
      {"icl", {"kind", "variant", "n_pairs", "tasks", "lambda", "tokens_file"}},
      {"prompt", {"kind", "variant", "n_pairs", "tasks", "steps", "lr", "batch"}},
      {"distill", {"kind", "layer", "steps", "lr", "batch_size", "train_sequences", "eval_sequences"}},
      {"maps", {"kind", "layer", "batch"}},
      {"sensitivity", {"kind", "t", "batch"}},
  };
  auto it = keys.find(kind);
  if (it == keys.end()) throw ConfigError("unknown analysis kind '" + kind + "'");
  return it->second;
}

inline Json to_json(const AnalysisRequest& a) {
  Json j{{"kind", a.kind}};
  const auto& keys = analysis_keys(a.kind);
  auto put = [&](const char* k, Json v) {
    if (keys.count(k)) j[k] = std::move(v);
  };
  put("probe", probe_kind_name(a.probe));
  put("layers", a.layers);
  put("t", a.t);
  put("lags", a.lags);
  put("t_grid", a.t_grid);
  put("lambda", a.lambda);
  put("reg", a.reg);
  put("batch", a.batch);
  put("variant", icl_variant_name(a.variant));
  put("n_pairs", a.n_pairs);
  put("tasks", a.tasks);
  put("tokens_file", a.tokens_file);
  put("steps", a.steps);
  put("lr", a.lr);
  put("layer", a.layer);
  put("batch_size", a.batch_size);
  put("train_sequences", a.train_sequences);
  put("eval_sequences", a.eval_sequences);
  return j;
}

inline AnalysisRequest analysis_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError("analysis entries need a kind");
  AnalysisRequest a;
  detail::read(j, "kind", a.kind, "analyses");
  const std::string w = "analysis '" + a.kind + "'";
  detail::check_keys(j, w, analysis_keys(a.kind));
  detail::read_enum(j, "probe", a.probe, w, detail::parse_probe_kind);
  detail::read(j, "layers", a.layers, w);
  detail::read(j, "t", a.t, w);
  detail::read(j, "lags", a.lags, w);
  detail::read(j, "t_grid", a.t_grid, w);
  detail::read(j, "lambda", a.lambda, w);
  detail::read(j, "reg", a.reg, w);
  detail::read(j, "batch", a.batch, w);
  detail::read_enum(j, "variant", a.variant, w, parse_icl_variant);
  detail::read(j, "n_pairs", a.n_pairs, w);
  detail::read(j, "tasks", a.tasks, w);
  detail::read(j, "tokens_file", a.tokens_file, w);
  detail::read(j, "steps", a.steps, w);
  detail::read(j, "lr", a.lr, w);
  detail::read(j, "layer", a.layer, w);
  detail::read(j, "batch_size", a.batch_size, w);
  detail::read(j, "train_sequences", a.train_sequences, w);
  detail::read(j, "eval_sequences", a.eval_sequences, w);
  return a;
}

inline Json to_json(const ExperimentConfig& c) {
  Json analyses = Json::array();
  for (const auto& a : c.analyses) analyses.push_back(to_json(a));
  return {{"name", c.name},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir},
          {"gen_batch", c.gen_batch},
          {"task", to_json(c.train.task)},
          {"encoding", to_json(c.train.encoding)},
          {"arch", to_json(c.train.arch)},
          {"train", train_json(c.train)},
          {"analyses", analyses}};
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  const std::string w = "config";
  detail::check_keys(j, w,
                     {"name", "seeds", "output_dir", "gen_batch", "task", "encoding", "arch",
                      "train", "analyses"});
  ExperimentConfig c;
  detail::read(j, "name", c.name, w);
  detail::read(j, "seeds", c.seeds, w);
  detail::read(j, "output_dir", c.output_dir, w);
  detail::read(j, "gen_batch", c.gen_batch, w);
  if (j.contains("task")) c.train.task = generator_from_json(j.at("task"));
  if (j.contains("encoding")) c.train.encoding = encoding_from_json(j.at("encoding"));
  if (j.contains("arch")) c.train.arch = arch_from_json(j.at("arch"));
  if (j.contains("train")) train_from_json(j.at("train"), c.train);
  if (j.contains("analyses")) {
    if (!j.at("analyses").is_array()) throw ConfigError("analyses must be a list");
    for (const auto& a : j.at("analyses")) c.analyses.push_back(analysis_from_json(a));
  }
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  return c;
}

inline ExperimentConfig parse_experiment(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return experiment_from_json(j);
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return parse_experiment(read_file(path));
}

inline std::string serialize_experiment(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace mesa
