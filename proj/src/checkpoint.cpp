#include "knowfree/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace knowfree {

namespace {

constexpr char kMagic[8] = {'K', 'F', 'T', 'E', 'N', 'S', 'O', 'R'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("truncated tensor file");
  }
  return v;
}

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

}  // namespace

void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

std::vector<NamedTensor> read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + ": not a tensor file");
  }
  if (get_u32(in) != kVersion) throw std::runtime_error(path.string() + ": unsupported version");
  const std::uint32_t count = get_u32(in);
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(get_u32(in));
    in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const std::uint32_t rows = get_u32(in);
    const std::uint32_t cols = get_u32(in);
    t.value.resize(rows, cols);
    if (!in.read(reinterpret_cast<char*>(t.value.data()),
                 static_cast<std::streamsize>(t.value.size() * sizeof(double)))) {
      throw std::runtime_error("truncated tensor file");
    }
    tensors.push_back(std::move(t));
  }
  return tensors;
}

nlohmann::json model_manifest(SpanModel& model) {
  nlohmann::json j;
  j["format"] = "knowfree-model";
  j["encoder"] = model.encoder_config().to_json();
  j["head"] = model.head_config().to_json();
  j["tokenizer"] = std::string(to_string(model.tokenizer()));
  j["labels"] = {{"target", model.labels().target_labels()},
                 {"extension", model.labels().extension_labels()}};
  j["tokens"] = model.tokens().tokens();
  return j;
}

void save_model(SpanModel& model, const std::filesystem::path& base) {
  std::vector<NamedTensor> tensors;
  for (const auto& ref : model.parameters()) {
    tensors.push_back({ref.parameter->name, ref.parameter->value});
  }
  write_tensors(with_suffix(base, ".ckpt"), tensors);
  std::ofstream out(with_suffix(base, ".json"), std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write manifest for " + base.string());
  out << model_manifest(model).dump(2) << '\n';
}

std::unique_ptr<SpanModel> load_model(const std::filesystem::path& base) {
  std::ifstream in(with_suffix(base, ".json"));
  if (!in) throw std::ios_base::failure("cannot open manifest " + with_suffix(base, ".json").string());
  const nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "knowfree-model") {
    throw std::runtime_error("not a model manifest: " + base.string());
  }
  auto model = std::make_unique<SpanModel>(
      EncoderConfig::from_json(j.at("encoder")), HeadConfig::from_json(j.at("head")),
      LabelVocabulary(j.at("labels").at("target").get<std::vector<std::string>>(),
                      j.at("labels").at("extension").get<std::vector<std::string>>()),
      TokenVocab(j.at("tokens").get<std::vector<std::string>>()),
      parse_tokenizer_mode(j.at("tokenizer").get<std::string>()), 0);

  std::map<std::string, Matrix> by_name;
  for (auto& t : read_tensors(with_suffix(base, ".ckpt"))) by_name[t.name] = std::move(t.value);
  for (const auto& ref : model->parameters()) {
    auto it = by_name.find(ref.parameter->name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint missing tensor " + ref.parameter->name);
    if (it->second.rows() != ref.parameter->value.rows() ||
        it->second.cols() != ref.parameter->value.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for " + ref.parameter->name);
    }
    ref.parameter->value = it->second;
  }
  return model;
}

}  // namespace knowfree
