#include "ctxlm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "config_json.hpp"
#include "ctxlm/rng.hpp"

namespace ctxlm {

// The payload is memcpy'd tensor storage; on a big-endian host the words
// would need swapping, which nothing here implements.
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[7] = {'C', 'T', 'X', 'L', 'M', '1', '\n'};
constexpr size_t kMagicLen = 7;
constexpr size_t kPreludeLen = kMagicLen + 4;  // magic + header length

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
  return Dtype::f32;
}
template <>
constexpr Dtype dtype_of<double>() {
  return Dtype::f64;
}

std::string hex64(uint64_t v) {
  static const char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<size_t>(i)] = digits[v & 0xf];
  return s;
}

// Names for the optimizer moment slots stored alongside each parameter.
std::string moment_name(const char* which, const std::string& param) {
  return std::string("opt.") + which + "." + param;
}

// The sampling state the next training step will use; derived from the
// train seed alone, recorded so the header spells it out.
uint64_t sampler_state(const TrainConfig& tc) {
  return named_stream(tc.seed, "sampler.train").next();
}

json parse_header(const std::string& path, std::ifstream& f, uint32_t* header_len) {
  char magic[kMagicLen];
  uint32_t hlen = 0;
  f.read(magic, kMagicLen);
  f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!f) throw IoError("checkpoint '" + path + "': truncated before header");
  if (std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw IoError("checkpoint '" + path + "': bad magic (not a CTXLM1 file)");
  std::string text(hlen, '\0');
  f.read(text.data(), hlen);
  if (!f) throw IoError("checkpoint '" + path + "': truncated header");
  if (header_len) *header_len = hlen;
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("checkpoint '" + path + "': malformed header JSON: " + e.what());
  }
}

ModelConfig model_from_header(const std::string& path, const json& header) {
  ModelConfig m;
  try {
    detail::merge_model(m, header.at("model"));
  } catch (const std::exception& e) {
    throw IoError("checkpoint '" + path + "': header model config: " + e.what());
  }
  auto problems = validate(m);
  if (!problems.empty())
    throw IoError("checkpoint '" + path + "': header model config invalid: " + problems[0]);
  return m;
}

TrainConfig train_from_header(const std::string& path, const json& header) {
  TrainConfig t;
  try {
    detail::merge_train(t, header.at("train"));
  } catch (const std::exception& e) {
    throw IoError("checkpoint '" + path + "': header train config: " + e.what());
  }
  return t;
}

}  // namespace

CheckpointInfo inspect_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint '" + path + "': cannot open");
  json header = parse_header(path, f, nullptr);
  CheckpointInfo info;
  info.model = model_from_header(path, header);
  info.train = train_from_header(path, header);
  try {
    info.step = header.at("step").get<int64_t>();
    info.dtype = dtype_from_string(header.at("dtype").get<std::string>());
  } catch (const std::exception& e) {
    throw IoError("checkpoint '" + path + "': header: " + e.what());
  }
  return info;
}

template <typename T>
void save_checkpoint(const std::string& path, ContextLMParams<T>& params,
                     const OptimizerState<T>& opt, const TrainConfig& tc, int64_t step) {
  auto tensors = params.all();
  if (opt.m.size() != tensors.size() || opt.v.size() != tensors.size())
    throw ContractError("save_checkpoint: optimizer state does not mirror the model");

  json manifest = json::array();
  uint64_t offset = 0;
  auto list = [&](const std::string& name, const Shape& shape, size_t count) {
    manifest.push_back(json{{"name", name},
                            {"shape", shape},
                            {"dtype", to_string(dtype_of<T>())},
                            {"offset", offset}});
    offset += count * sizeof(T);
  };
  for (const Tensor<T>* p : tensors) list(p->name, p->shape, p->data.size());
  for (size_t i = 0; i < tensors.size(); ++i)
    list(moment_name("m", tensors[i]->name), tensors[i]->shape, opt.m[i].size());
  for (size_t i = 0; i < tensors.size(); ++i)
    list(moment_name("v", tensors[i]->name), tensors[i]->shape, opt.v[i].size());

  std::vector<char> payload(offset);
  char* out = payload.data();
  auto blit = [&](const std::vector<T>& src) {
    std::memcpy(out, src.data(), src.size() * sizeof(T));
    out += src.size() * sizeof(T);
  };
  for (const Tensor<T>* p : tensors) blit(p->data);
  for (const auto& m : opt.m) blit(m);
  for (const auto& v : opt.v) blit(v);

  const uint64_t checksum = fnv1a64(payload.data(), payload.size());
  json header{{"dtype", to_string(dtype_of<T>())},
              {"model", detail::to_json(params.cfg)},
              {"train", detail::to_json(tc)},
              {"step", step},
              {"opt_step", opt.step},
              {"rng_state", hex64(sampler_state(tc))},
              {"payload_bytes", offset},
              {"payload_checksum", hex64(checksum)},
              {"tensors", manifest}};
  const std::string text = header.dump();
  const uint32_t hlen = static_cast<uint32_t>(text.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open '" + tmp + "'");
    f.write(kMagic, kMagicLen);
    f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    f.write(reinterpret_cast<const char*>(&checksum), sizeof checksum);
    f.flush();
    if (!f) throw IoError("save_checkpoint: write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("save_checkpoint: rename to '" + path + "': " + ec.message());
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint '" + path + "': cannot open");
  uint32_t hlen = 0;
  json header = parse_header(path, f, &hlen);

  std::string dtype_str;
  uint64_t payload_bytes = 0;
  std::string checksum_hex;
  int64_t step = 0, opt_step = 0;
  try {
    dtype_str = header.at("dtype").get<std::string>();
    payload_bytes = header.at("payload_bytes").get<uint64_t>();
    checksum_hex = header.at("payload_checksum").get<std::string>();
    step = header.at("step").get<int64_t>();
    opt_step = header.at("opt_step").get<int64_t>();
  } catch (const std::exception& e) {
    throw IoError("checkpoint '" + path + "': header: " + e.what());
  }
  if (dtype_str != to_string(dtype_of<T>()))
    throw IoError("checkpoint '" + path + "': holds " + dtype_str + " tensors, expected " +
                  to_string(dtype_of<T>()));

  std::vector<char> payload(payload_bytes);
  f.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  uint64_t trailer = 0;
  f.read(reinterpret_cast<char*>(&trailer), sizeof trailer);
  if (!f) throw IoError("checkpoint '" + path + "': truncated payload");
  f.peek();
  if (!f.eof())
    throw IoError("checkpoint '" + path + "': trailing bytes after the checksum");
  const uint64_t checksum = fnv1a64(payload.data(), payload.size());
  if (checksum != trailer || hex64(checksum) != checksum_hex)
    throw IoError("checkpoint '" + path + "': payload checksum mismatch (corrupted or torn file)");

  LoadedCheckpoint<T> lc;
  lc.train = train_from_header(path, header);
  lc.step = step;
  lc.params = ContextLMParams<T>::init(model_from_header(path, header));
  lc.opt = OptimizerState<T>::zeros_like(lc.params);
  lc.opt.step = opt_step;

  // Index the manifest, rejecting duplicates and overlaps up front.
  if (!header.contains("tensors") || !header.at("tensors").is_array())
    throw IoError("checkpoint '" + path + "': header lacks the tensor manifest");
  struct Entry {
    Shape shape;
    uint64_t offset = 0;
  };
  std::map<std::string, Entry> index;
  std::vector<std::pair<uint64_t, uint64_t>> spans;  // (offset, bytes)
  for (const json& e : header.at("tensors")) {
    Entry ent;
    std::string name;
    std::string edtype;
    try {
      name = e.at("name").get<std::string>();
      ent.shape = e.at("shape").get<Shape>();
      ent.offset = e.at("offset").get<uint64_t>();
      edtype = e.at("dtype").get<std::string>();
    } catch (const std::exception& ex) {
      throw IoError("checkpoint '" + path + "': malformed manifest entry: " + ex.what());
    }
    if (edtype != dtype_str)
      throw IoError("checkpoint '" + path + "': manifest entry '" + name +
                    "' dtype disagrees with the header");
    const uint64_t bytes = static_cast<uint64_t>(numel(ent.shape)) * sizeof(T);
    if (ent.offset + bytes > payload_bytes)
      throw IoError("checkpoint '" + path + "': manifest entry '" + name +
                    "' runs past the payload");
    if (!index.emplace(name, ent).second)
      throw IoError("checkpoint '" + path + "': duplicate manifest entry '" + name + "'");
    spans.emplace_back(ent.offset, bytes);
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].first + spans[i - 1].second)
      throw IoError("checkpoint '" + path + "': manifest entries overlap");

  auto fetch = [&](const std::string& name, const Shape& shape, std::vector<T>& dst) {
    auto it = index.find(name);
    if (it == index.end())
      throw IoError("checkpoint '" + path + "': manifest is missing tensor '" + name + "'");
    if (it->second.shape != shape)
      throw IoError("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                    shape_str(it->second.shape) + ", model expects " + shape_str(shape));
    std::memcpy(dst.data(), payload.data() + it->second.offset, dst.size() * sizeof(T));
  };
  auto tensors = lc.params.all();
  for (size_t i = 0; i < tensors.size(); ++i) {
    fetch(tensors[i]->name, tensors[i]->shape, tensors[i]->data);
    fetch(moment_name("m", tensors[i]->name), tensors[i]->shape, lc.opt.m[i]);
    fetch(moment_name("v", tensors[i]->name), tensors[i]->shape, lc.opt.v[i]);
  }
  if (index.size() != 3 * tensors.size())
    throw IoError("checkpoint '" + path + "': manifest holds " + std::to_string(index.size()) +
                  " tensors, model expects " + std::to_string(3 * tensors.size()));
  return lc;
}

#define CTXLM_INSTANTIATE_CKPT(T)                                                        \
  template void save_checkpoint<T>(const std::string&, ContextLMParams<T>&,              \
                                   const OptimizerState<T>&, const TrainConfig&, int64_t); \
  template LoadedCheckpoint<T> load_checkpoint<T>(const std::string&);

CTXLM_INSTANTIATE_CKPT(float)
CTXLM_INSTANTIATE_CKPT(double)

#undef CTXLM_INSTANTIATE_CKPT

}  // namespace ctxlm
