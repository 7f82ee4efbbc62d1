// SPDX-License-Identifier: Apache-2.0
#include "headlrp/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <vector>

namespace headlrp {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

namespace {

template <typename WeightsT, typename Fn>
void visit_tensors(WeightsT& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  fn("position_embedding", w.position_embedding);
  fn("embedding_ln.gain", w.embedding_ln.gain);
  fn("embedding_ln.bias", w.embedding_ln.bias);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    auto& b = w.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    fn(p + "attn.wq", b.wq);
    fn(p + "attn.bq", b.bq);
    fn(p + "attn.wk", b.wk);
    fn(p + "attn.bk", b.bk);
    fn(p + "attn.wv", b.wv);
    fn(p + "attn.bv", b.bv);
    fn(p + "attn.wo", b.wo);
    fn(p + "attn.bo", b.bo);
    fn(p + "ln1.gain", b.ln1.gain);
    fn(p + "ln1.bias", b.ln1.bias);
    fn(p + "ffn.w1", b.w1);
    fn(p + "ffn.b1", b.b1);
    fn(p + "ffn.w2", b.w2);
    fn(p + "ffn.b2", b.b2);
    fn(p + "ln2.gain", b.ln2.gain);
    fn(p + "ln2.bias", b.ln2.bias);
  }
  fn("classifier.weight", w.classifier_weight);
  fn("classifier.bias", w.classifier_bias);
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(ids[i]);
  }
  return out.empty() ? "-" : out;
}

std::vector<std::size_t> split_sizes(const std::string& text, const std::string& context) {
  std::vector<std::size_t> out;
  if (text == "-") return out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw LoadError(context + ": bad integer list '" + text + "'");
    }
  }
  return out;
}

struct TensorRecord {
  DType dtype = DType::f64;
  Shape shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

void apply_config_field(ModelConfig& c, const std::string& key, const std::string& value) {
  auto as_size = [&] {
    const auto v = split_sizes(value, "config " + key);
    if (v.size() != 1) throw LoadError("config " + key + ": expected one integer");
    return v[0];
  };
  if (key == "num_blocks") c.num_blocks = as_size();
  else if (key == "num_heads") c.num_heads = as_size();
  else if (key == "hidden_dim") c.hidden_dim = as_size();
  else if (key == "ffn_dim") c.ffn_dim = as_size();
  else if (key == "vocab_size") c.vocab_size = as_size();
  else if (key == "max_positions") c.max_positions = as_size();
  else if (key == "num_classes") c.num_classes = as_size();
  else if (key == "mask_token_id") c.mask_token_id = as_size();
  else if (key == "cls_index") c.cls_index = as_size();
  else if (key == "special_token_ids") c.special_token_ids = split_sizes(value, "config " + key);
  else if (key == "causal") c.causal = as_size() != 0;
  else if (key == "task") c.task = parse_task(value);
  else if (key == "layer_norm_eps") c.layer_norm_eps = std::stod(value);
  else throw LoadError("unknown config key '" + key + "'");
}

}  // namespace

void for_each_tensor(ModelWeights& weights, const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_tensors(weights, fn);
}

void for_each_tensor(const ModelWeights& weights,
                     const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_tensors(weights, fn);
}

void save_weights(const std::filesystem::path& manifest_path, const ModelConfig& config,
                  const ModelWeights& weights, DType dtype) {
  validate_weights(config, weights);
  std::vector<unsigned char> blob;
  std::ostringstream records;
  for_each_tensor(weights, [&](const std::string& name, const Tensor& t) {
    const std::size_t offset = blob.size();
    for (double v : t.data()) {
      if (dtype == DType::f64) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof v);
        blob.insert(blob.end(), bytes, bytes + sizeof bytes);
      } else {
        const auto f = static_cast<float>(v);
        unsigned char bytes[sizeof(float)];
        std::memcpy(bytes, &f, sizeof f);
        blob.insert(blob.end(), bytes, bytes + sizeof bytes);
      }
    }
    records << "tensor " << name << ' ' << (dtype == DType::f64 ? "f64" : "f32") << ' '
            << join_ids(t.shape()) << ' ' << offset << ' ' << blob.size() - offset << '\n';
  });

  auto blob_name = manifest_path.stem().string() + ".bin";
  const auto blob_path = manifest_path.parent_path() / blob_name;
  {
    std::ofstream out(blob_path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + blob_path.string());
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  }

  std::ofstream out(manifest_path);
  if (!out) throw LoadError("cannot write " + manifest_path.string());
  out << "headlrp-weights 1\n";
  out << "config num_blocks " << config.num_blocks << '\n';
  out << "config num_heads " << config.num_heads << '\n';
  out << "config hidden_dim " << config.hidden_dim << '\n';
  out << "config ffn_dim " << config.ffn_dim << '\n';
  out << "config vocab_size " << config.vocab_size << '\n';
  out << "config max_positions " << config.max_positions << '\n';
  out << "config num_classes " << config.num_classes << '\n';
  out << "config mask_token_id " << config.mask_token_id << '\n';
  out << "config cls_index " << config.cls_index << '\n';
  out << "config special_token_ids " << join_ids(config.special_token_ids) << '\n';
  out << "config causal " << (config.causal ? 1 : 0) << '\n';
  out << "config task " << to_string(config.task) << '\n';
  out << "config layer_norm_eps " << format_double(config.layer_norm_eps) << '\n';
  out << "blob " << blob_name << '\n';
  out << "blob_length " << blob.size() << '\n';
  out << "blob_checksum fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(blob)
      << std::dec << '\n';
  out << records.str();
}

std::pair<ModelConfig, ModelWeights> load_weights(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("weights manifest not found: " + manifest_path.string());

  ModelConfig config;
  std::string blob_name;
  std::size_t blob_length = 0;
  bool have_length = false;
  std::string checksum;
  std::map<std::string, TensorRecord> records;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string kind;
    fields >> kind;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
    if (kind == "headlrp-weights") {
      int version = 0;
      fields >> version;
      if (version != 1) throw LoadError(where + ": unsupported manifest version");
    } else if (kind == "config") {
      std::string key, value;
      if (!(fields >> key >> value)) throw LoadError(where + ": malformed config line");
      try {
        apply_config_field(config, key, value);
      } catch (const LoadError&) {
        throw;
      } catch (const std::exception& e) {
        throw LoadError(where + ": " + e.what());
      }
    } else if (kind == "blob") {
      fields >> blob_name;
    } else if (kind == "blob_length") {
      if (!(fields >> blob_length)) throw LoadError(where + ": malformed blob_length");
      have_length = true;
    } else if (kind == "blob_checksum") {
      fields >> checksum;
    } else if (kind == "tensor") {
      std::string name, dtype, shape;
      TensorRecord rec;
      if (!(fields >> name >> dtype >> shape >> rec.offset >> rec.length)) {
        throw LoadError(where + ": malformed tensor record");
      }
      if (dtype == "f64") rec.dtype = DType::f64;
      else if (dtype == "f32") rec.dtype = DType::f32;
      else throw LoadError(where + ": tensor '" + name + "' has unknown dtype " + dtype);
      rec.shape = split_sizes(shape, where);
      if (!records.emplace(name, rec).second) throw LoadError(where + ": duplicate tensor '" + name + "'");
    } else {
      throw LoadError(where + ": unknown record '" + kind + "'");
    }
  }
  if (blob_name.empty()) throw LoadError(manifest_path.string() + ": no blob record");
  if (!have_length) throw LoadError(manifest_path.string() + ": no blob_length record");
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw LoadError(e.what());
  }

  const auto blob_path = manifest_path.parent_path() / blob_name;
  std::ifstream blob_in(blob_path, std::ios::binary);
  if (!blob_in) throw LoadError("weights blob not found: " + blob_path.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(blob_in)), std::istreambuf_iterator<char>());
  if (blob.size() != blob_length) {
    throw LoadError("weights blob " + blob_path.string() + " has " + std::to_string(blob.size()) +
                    " bytes, manifest declares " + std::to_string(blob_length) + " (truncated or corrupt)");
  }
  if (!checksum.empty()) {
    std::ostringstream actual;
    actual << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(blob);
    if (actual.str() != checksum) {
      throw LoadError("weights blob checksum mismatch: manifest " + checksum + ", blob " + actual.str());
    }
  }

  ModelWeights weights = zero_weights(config);
  for_each_tensor(weights, [&](const std::string& name, Tensor& t) {
    const auto it = records.find(name);
    if (it == records.end()) throw LoadError("missing tensor '" + name + "'");
    const TensorRecord& rec = it->second;
    if (rec.shape != t.shape()) {
      throw LoadError("tensor '" + name + "' has shape " + shape_string(rec.shape) + ", config expects " +
                      shape_string(t.shape()));
    }
    const std::size_t width = rec.dtype == DType::f64 ? sizeof(double) : sizeof(float);
    if (rec.length != t.size() * width || rec.offset + rec.length > blob.size()) {
      throw LoadError("tensor '" + name + "' byte range does not fit its shape or the blob");
    }
    const unsigned char* src = blob.data() + rec.offset;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (rec.dtype == DType::f64) {
        double v;
        std::memcpy(&v, src + i * width, sizeof v);
        t[i] = v;
      } else {
        float v;
        std::memcpy(&v, src + i * width, sizeof v);
        t[i] = static_cast<double>(v);
      }
    }
    records.erase(it);
  });
  if (!records.empty()) throw LoadError("unexpected tensor '" + records.begin()->first + "' in manifest");
  try {
    validate_weights(config, weights);
  } catch (const std::invalid_argument& e) {
    throw LoadError(e.what());
  }
  return {config, std::move(weights)};
}

}  // namespace headlrp
