// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "headlrp/synthetic.hpp"
#include "headlrp/weights_io.hpp"

using namespace headlrp;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("headlrp_wio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string replace_line(const std::string& text, const std::string& prefix, const std::string& replacement) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0) {
      if (!replacement.empty()) out += replacement + "\n";
    } else {
      out += line + "\n";
    }
  }
  return out;
}

void check_load_error(const fs::path& manifest, const std::string& fragment) {
  try {
    (void)load_weights(manifest);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    INFO(e.what());
    CHECK(std::string(e.what()).find(fragment) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
  const std::string a = "a";
  CHECK(fnv1a64({reinterpret_cast<const unsigned char*>(a.data()), a.size()}) == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("round trip in f64 is exact") {
  ModelConfig c = synthetic::small_config(2, 2, 8, 12, 11, 3, Task::qa);
  c.special_token_ids = {1, 2};
  c.causal = true;
  const ModelWeights w = synthetic::random_weights(c, 7);
  const auto dir = fresh_dir("f64");
  save_weights(dir / "model.manifest", c, w);
  const auto [config, weights] = load_weights(dir / "model.manifest");
  CHECK(config.num_blocks == c.num_blocks);
  CHECK(config.task == Task::qa);
  CHECK(config.causal);
  CHECK(config.special_token_ids == c.special_token_ids);
  CHECK(config.layer_norm_eps == c.layer_norm_eps);
  for_each_tensor(w, [&](const std::string& name, const Tensor& t) {
    for_each_tensor(weights, [&](const std::string& other, const Tensor& u) {
      if (other == name) CHECK(u == t);
    });
  });
  CHECK(forward(c, w, std::vector<std::size_t>{1, 3, 4}).logits ==
        forward(config, weights, std::vector<std::size_t>{1, 3, 4}).logits);
}

TEST_CASE("round trip in f32 widens within float precision") {
  const ModelConfig c = synthetic::small_config(1, 2, 8, 8, 9, 2);
  const ModelWeights w = synthetic::random_weights(c, 3);
  const auto dir = fresh_dir("f32");
  save_weights(dir / "model.manifest", c, w, DType::f32);
  const auto [config, weights] = load_weights(dir / "model.manifest");
  for_each_tensor(w, [&](const std::string& name, const Tensor& t) {
    for_each_tensor(weights, [&](const std::string& other, const Tensor& u) {
      if (other != name) return;
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(u[i] == static_cast<double>(static_cast<float>(t[i])));
    });
  });
  CHECK(read_text(dir / "model.manifest").find(" f32 ") != std::string::npos);
}

TEST_CASE("load errors") {
  const ModelConfig c = synthetic::small_config(1, 2, 8, 8, 9, 2);
  const ModelWeights w = synthetic::random_weights(c, 4);
  const auto dir = fresh_dir("errors");
  const auto manifest = dir / "model.manifest";
  const auto blob = dir / "model.bin";
  auto reset = [&] { save_weights(manifest, c, w); };

  check_load_error(dir / "nope.manifest", "weights manifest not found: ");

  reset();
  fs::remove(blob);
  check_load_error(manifest, "weights blob not found: ");

  reset();
  std::string bytes = read_text(blob);
  write_text(blob, bytes.substr(0, bytes.size() - 8));
  check_load_error(manifest, "bytes");

  reset();
  bytes = read_text(blob);
  bytes[10] = static_cast<char>(bytes[10] ^ 0x55);
  write_text(blob, bytes);
  check_load_error(manifest, "checksum mismatch");

  reset();
  write_text(manifest, replace_line(read_text(manifest), "tensor block0.attn.wq ", ""));
  check_load_error(manifest, "missing tensor 'block0.attn.wq'");

  reset();
  std::string text = read_text(manifest);
  write_text(manifest, replace_line(text, "config hidden_dim", "config hidden_dim 4"));
  check_load_error(manifest, "config expects");

  reset();
  text = read_text(manifest);
  write_text(manifest, text + "tensor extra.w f64 1 0 8\n");
  check_load_error(manifest, "unexpected tensor 'extra.w'");

  reset();
  write_text(manifest, replace_line(read_text(manifest), "headlrp-weights", "headlrp-weights 2"));
  check_load_error(manifest, "unsupported manifest version");

  reset();
  write_text(manifest, read_text(manifest) + "config colour blue\n");
  check_load_error(manifest, "unknown config key");
}
