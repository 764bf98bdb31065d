#include "iclmark/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "iclmark/errors.hpp"

namespace iclmark::model {

namespace {
constexpr char kBankMagic[8] = {'I', 'C', 'L', 'M', 'K', 'B', 'N', 'K'};
constexpr std::uint32_t kBankVersion = 1;
}  // namespace

void save_checkpoint(const SoftTokenBank& bank, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());

  nlohmann::json header;
  header["base_model_id"] = bank.meta.base_model_id;
  header["seed"] = bank.meta.seed;
  header["steps"] = bank.meta.steps;
  header["init"] = to_string(bank.meta.init);
  header["base_param_digest"] = bank.meta.base_param_digest;
  header["rows"] = bank.rows.rows();
  header["cols"] = bank.rows.cols();
  header["float_width"] = 64;
  header["layout"] = "row-major";
  nlohmann::json offsets = nlohmann::json::object();
  for (const auto& [tag, range] : bank.tag_offsets) {
    offsets[tag] = {range.begin, range.width};
  }
  header["tag_offsets"] = offsets;
  const std::string header_text = header.dump();

  out.write(kBankMagic, sizeof(kBankMagic));
  out.write(reinterpret_cast<const char*>(&kBankVersion), sizeof(kBankVersion));
  const auto header_len = static_cast<std::uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  // row-major on disk regardless of in-memory layout
  for (Eigen::Index r = 0; r < bank.rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < bank.rows.cols(); ++c) {
      const double v = bank.rows(r, c);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!out) throw IoError("short write to checkpoint: " + path.string());
}

SoftTokenBank load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kBankMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kBankVersion) throw IoError("unsupported checkpoint version");
  std::uint32_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw IoError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }

  SoftTokenBank bank;
  try {
    bank.meta.base_model_id = header.at("base_model_id").get<std::string>();
    bank.meta.seed = header.at("seed").get<std::uint64_t>();
    bank.meta.steps = header.at("steps").get<std::int64_t>();
    bank.meta.init = init_strategy_from_string(header.at("init").get<std::string>());
    bank.meta.base_param_digest =
        header.at("base_param_digest").get<std::string>();
    if (header.at("float_width").get<int>() != 64) {
      throw IoError("unsupported checkpoint float width");
    }
    const auto rows = header.at("rows").get<Eigen::Index>();
    const auto cols = header.at("cols").get<Eigen::Index>();
    if (rows < 1 || cols < 1) throw IoError("checkpoint has degenerate shape");
    bank.rows.resize(rows, cols);
    for (const auto& [tag, range] : header.at("tag_offsets").items()) {
      bank.tag_offsets[tag] = {range.at(0).get<int>(), range.at(1).get<int>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }

  for (Eigen::Index r = 0; r < bank.rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < bank.rows.cols(); ++c) {
      double v = 0.0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      bank.rows(r, c) = v;
    }
  }
  if (!in) throw IoError("truncated checkpoint data: " + path.string());
  return bank;
}

SoftTokenBank load_checkpoint(const std::filesystem::path& path,
                              const Backend& backend, bool* digest_ok) {
  SoftTokenBank bank = load_checkpoint(path);
  const bool ok = bank.meta.base_param_digest == backend.base_param_digest();
  if (!ok) {
    std::cerr << "warning: checkpoint " << path.string()
              << " was trained against base model digest "
              << bank.meta.base_param_digest.substr(0, 12)
              << "... but the active backend has digest "
              << backend.base_param_digest().substr(0, 12) << "...\n";
  }
  if (digest_ok != nullptr) *digest_ok = ok;
  return bank;
}

}  // namespace iclmark::model
