#include "iclmark/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "iclmark/digest.hpp"
#include "iclmark/errors.hpp"

namespace iclmark::retrieval {

using Eigen::MatrixXd;
using Eigen::VectorXd;

HashedEmbedder::HashedEmbedder(int dim) : dim_(dim) {
  if (dim_ < 1) throw ConfigError("embedder dimension must be >= 1");
}

Eigen::VectorXd HashedEmbedder::embed(std::string_view text) const {
  VectorXd v = VectorXd::Zero(dim_);
  // FNV-1a over character trigrams; sign from one hash bit spreads mass
  // over both half-axes so distinct texts decorrelate.
  const std::string padded = "^" + std::string(text) + "$";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t j = i; j < i + 3; ++j) {
      h ^= static_cast<unsigned char>(padded[j]);
      h *= 1099511628211ULL;
    }
    const auto bucket = static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim_));
    v(bucket) += (h >> 63) != 0U ? -1.0 : 1.0;
  }
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

std::string HashedEmbedder::id() const {
  return "hashed-trigram-v1/" + std::to_string(dim_);
}

PrecomputedEmbedder PrecomputedEmbedder::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ProviderError("cannot read embedding table: " + path.string());

  PrecomputedEmbedder provider;
  Sha256 content_hash;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    content_hash.update(line);
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
      const auto text = record.at("text").get<std::string>();
      const auto values = record.at("vector").get<std::vector<double>>();
      if (values.empty()) throw ProviderError("empty vector for text: " + text);
      if (provider.dim_ == 0) {
        provider.dim_ = static_cast<int>(values.size());
      } else if (provider.dim_ != static_cast<int>(values.size())) {
        throw ProviderError("inconsistent vector dimension at line " +
                            std::to_string(line_no));
      }
      provider.table_[text] =
          Eigen::Map<const VectorXd>(values.data(),
                                     static_cast<Eigen::Index>(values.size()));
    } catch (const nlohmann::json::exception& e) {
      throw ProviderError("bad embedding record at line " + std::to_string(line_no) +
                          ": " + e.what());
    }
  }
  if (provider.table_.empty()) {
    throw ProviderError("embedding table is empty: " + path.string());
  }
  provider.normalized_ = std::all_of(
      provider.table_.begin(), provider.table_.end(), [](const auto& kv) {
        return std::abs(kv.second.norm() - 1.0) < 1e-6;
      });
  provider.id_ = "precomputed/" + content_hash.hex().substr(0, 16);
  return provider;
}

Eigen::VectorXd PrecomputedEmbedder::embed(std::string_view text) const {
  auto it = table_.find(text);
  if (it == table_.end()) {
    throw ProviderError("no embedding for text: " + std::string(text));
  }
  return it->second;
}

VectorIndex VectorIndex::build(const std::vector<markup::Demonstration>& pool,
                               const EmbeddingProvider& provider) {
  if (pool.empty()) throw InputError("cannot index an empty pool");
  VectorIndex index;
  index.vectors_.resize(static_cast<Eigen::Index>(pool.size()), provider.dim());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const VectorXd v = provider.embed(pool[i].text);
    if (!v.allFinite()) {
      throw ProviderError("non-finite embedding for text: " + pool[i].text);
    }
    index.vectors_.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  index.payloads_ = pool;
  index.provider_id_ = provider.id();
  return index;
}

namespace {
constexpr char kIndexMagic[8] = {'I', 'C', 'L', 'M', 'K', 'I', 'D', 'X'};
constexpr std::uint32_t kIndexVersion = 1;
}  // namespace

void VectorIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write index: " + path.string());

  nlohmann::json header;
  header["provider_id"] = provider_id_;
  header["rows"] = vectors_.rows();
  header["dim"] = vectors_.cols();
  nlohmann::json payloads = nlohmann::json::array();
  for (const markup::Demonstration& d : payloads_) {
    payloads.push_back({{"text", d.text}, {"label", d.label}});
  }
  header["payloads"] = payloads;
  const std::string header_text = header.dump();

  out.write(kIndexMagic, sizeof(kIndexMagic));
  out.write(reinterpret_cast<const char*>(&kIndexVersion), sizeof(kIndexVersion));
  const auto header_len = static_cast<std::uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (Eigen::Index r = 0; r < vectors_.rows(); ++r) {
    for (Eigen::Index c = 0; c < vectors_.cols(); ++c) {
      const double v = vectors_(r, c);
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!out) throw IoError("short write to index: " + path.string());
}

VectorIndex VectorIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read index: " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0) {
    throw IoError("not an index file: " + path.string());
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kIndexVersion) throw IoError("unsupported index version");
  std::uint32_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw IoError("truncated index header");

  VectorIndex index;
  try {
    const nlohmann::json header = nlohmann::json::parse(header_text);
    index.provider_id_ = header.at("provider_id").get<std::string>();
    const auto rows = header.at("rows").get<Eigen::Index>();
    const auto dim = header.at("dim").get<Eigen::Index>();
    index.vectors_.resize(rows, dim);
    for (const auto& p : header.at("payloads")) {
      index.payloads_.push_back(
          {p.at("text").get<std::string>(), p.at("label").get<std::string>()});
    }
    if (static_cast<Eigen::Index>(index.payloads_.size()) != rows) {
      throw IoError("index payload count does not match row count");
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed index header: ") + e.what());
  }

  for (Eigen::Index r = 0; r < index.vectors_.rows(); ++r) {
    for (Eigen::Index c = 0; c < index.vectors_.cols(); ++c) {
      double v = 0.0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      index.vectors_(r, c) = v;
    }
  }
  if (!in) throw IoError("truncated index data: " + path.string());
  return index;
}

void RetrievalConfig::validate() const {
  if (k < 1) throw ConfigError("retrieval k must be >= 1");
  if (lambda < 0.0 || lambda > 1.0) {
    throw ConfigError("retrieval lambda must lie in [0, 1]");
  }
}

namespace {

double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace

std::vector<std::size_t> mmr_select_indices(const VectorIndex& index,
                                            std::string_view query,
                                            const EmbeddingProvider& provider,
                                            const RetrievalConfig& cfg) {
  cfg.validate();
  if (index.size() == 0) throw InputError("cannot select from an empty index");
  if (provider.id() != index.provider_id()) {
    throw ProviderError("index was built with provider " + index.provider_id() +
                        " but queried with " + provider.id());
  }

  const std::size_t n = index.size();
  const Eigen::RowVectorXd q = provider.embed(query).transpose();

  std::vector<double> query_sim(n);
  for (std::size_t i = 0; i < n; ++i) {
    query_sim[i] = cosine(q, index.vectors().row(static_cast<Eigen::Index>(i)));
  }

  const std::size_t want = std::min(static_cast<std::size_t>(cfg.k), n);
  std::vector<std::size_t> selected;
  selected.reserve(want);
  std::vector<bool> taken(n, false);
  // running max similarity to the selected set, updated per pick
  std::vector<double> max_sel_sim(n, -std::numeric_limits<double>::infinity());

  while (selected.size() < want) {
    double best_score = -std::numeric_limits<double>::infinity();
    std::size_t best_i = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double score =
          selected.empty()
              ? query_sim[i]
              : cfg.lambda * query_sim[i] - (1.0 - cfg.lambda) * max_sel_sim[i];
      if (score > best_score) {
        best_score = score;
        best_i = i;
      }
    }
    taken[best_i] = true;
    selected.push_back(best_i);
    const auto picked = index.vectors().row(static_cast<Eigen::Index>(best_i));
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      max_sel_sim[i] = std::max(
          max_sel_sim[i],
          cosine(index.vectors().row(static_cast<Eigen::Index>(i)), picked));
    }
  }
  return selected;
}

std::vector<markup::Demonstration> mmr_select(const VectorIndex& index,
                                              std::string_view query,
                                              const EmbeddingProvider& provider,
                                              const RetrievalConfig& cfg) {
  std::vector<markup::Demonstration> out;
  for (std::size_t i : mmr_select_indices(index, query, provider, cfg)) {
    out.push_back(index.payload(i));
  }
  return out;
}

markup::OptionBlock rescope_options(const std::vector<markup::Demonstration>& selected,
                                    const markup::LabelMap& label_map,
                                    bool include_nota, std::uint64_t seed) {
  if (selected.empty()) throw InputError("cannot re-scope from an empty selection");
  std::vector<std::string> descriptors;
  std::set<std::string> seen;
  for (const markup::Demonstration& demo : selected) {
    auto it = label_map.find(demo.label);
    if (it == label_map.end()) {
      throw LabelMapError("no descriptor for label: " + demo.label);
    }
    if (seen.insert(it->second).second) descriptors.push_back(it->second);
  }
  return markup::build_option_block(descriptors, include_nota, seed);
}

std::vector<markup::Demonstration> trim_to_budget(
    const markup::TemplateSpec& tmpl, const markup::TagSet& tags,
    const markup::OptionBlock& option_block,
    std::vector<markup::Demonstration> selected, std::string_view query,
    const markup::LabelMap& label_map, const model::Backend& backend) {
  const auto budget = static_cast<std::size_t>(backend.context_budget());
  while (true) {
    const markup::RenderedPrompt prompt =
        markup::render_prompt(tmpl, tags, option_block, selected, query, label_map,
                              backend.tokenizer());
    if (prompt.size() <= budget) return selected;
    if (selected.empty()) {
      throw BudgetError("prompt exceeds context budget even with no demonstrations");
    }
    selected.pop_back();
  }
}

}  // namespace iclmark::retrieval
