#include "selfshot/retrieve.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace selfshot::retrieve {

namespace {
constexpr char kMagic[8] = {'S', 'S', 'I', 'N', 'D', 'E', 'X', '\n'};
constexpr std::uint32_t kVersion = 1;

std::vector<double> renormalize(const std::vector<float>& raw) {
  std::vector<double> v(raw.size());
  double s = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    v[i] = static_cast<double>(raw[i]);
    s += v[i] * v[i];
  }
  SS_CHECK(s > 0.0, "index embedding must be nonzero");
  double inv = 1.0 / std::sqrt(s);
  for (auto& x : v) x *= inv;
  return v;
}
}  // namespace

EmbeddingIndex::EmbeddingIndex(std::int64_t dim, std::string encoder_fingerprint)
    : dim_(dim), fingerprint_(std::move(encoder_fingerprint)) {
  SS_CHECK(dim_ >= 1, "index dimension must be >= 1");
}

void EmbeddingIndex::build_lookup() const {
  if (static_cast<std::int64_t>(lookup_.size()) == size()) return;
  lookup_.clear();
  for (std::size_t i = 0; i < ids_.size(); ++i) lookup_[ids_[i]] = static_cast<std::int64_t>(i);
}

bool EmbeddingIndex::has(const std::string& id) const {
  build_lookup();
  return lookup_.count(id) > 0;
}

std::vector<double> EmbeddingIndex::embedding_of(const std::string& id) const {
  build_lookup();
  auto it = lookup_.find(id);
  SS_CHECK(it != lookup_.end(), "id not in index: " + id);
  return std::vector<double>(vec(it->second), vec(it->second) + dim_);
}

void EmbeddingIndex::append(const std::string& id, const Tensor& embedding,
                            const std::string& encoder_fingerprint) {
  SS_CHECK(encoder_fingerprint == fingerprint_,
           "encoder fingerprint mismatch: index built with " + fingerprint_ + ", got " +
               encoder_fingerprint);
  SS_CHECK(embedding.numel() == dim_, "embedding dimension mismatch");
  SS_CHECK(!has(id), "duplicate id in index: " + id);
  std::vector<float> raw(static_cast<std::size_t>(dim_));
  for (std::int64_t i = 0; i < dim_; ++i) raw[static_cast<std::size_t>(i)] = static_cast<float>(embedding[i]);
  std::vector<double> v = renormalize(raw);
  ids_.push_back(id);
  raw_.insert(raw_.end(), raw.begin(), raw.end());
  values_.insert(values_.end(), v.begin(), v.end());
  lookup_[id] = static_cast<std::int64_t>(ids_.size()) - 1;
}

EmbeddingIndex EmbeddingIndex::subset(const std::vector<std::string>& keep_ids) const {
  build_lookup();
  EmbeddingIndex out(dim_, fingerprint_);
  for (const auto& id : keep_ids) {
    auto it = lookup_.find(id);
    SS_CHECK(it != lookup_.end(), "subset: id not in index: " + id);
    std::int64_t i = it->second;
    out.ids_.push_back(id);
    out.raw_.insert(out.raw_.end(), raw_.begin() + i * dim_, raw_.begin() + (i + 1) * dim_);
    out.values_.insert(out.values_.end(), values_.begin() + i * dim_,
                       values_.begin() + (i + 1) * dim_);
  }
  return out;
}

void EmbeddingIndex::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SS_REQUIRE(f.good(), "cannot write index: " + path);
  f.write(kMagic, sizeof(kMagic));
  auto put32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  put32(kVersion);
  put32(static_cast<std::uint32_t>(dim_));
  put32(static_cast<std::uint32_t>(fingerprint_.size()));
  f.write(fingerprint_.data(), static_cast<std::streamsize>(fingerprint_.size()));
  put32(static_cast<std::uint32_t>(ids_.size()));
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    put32(static_cast<std::uint32_t>(ids_[i].size()));
    f.write(ids_[i].data(), static_cast<std::streamsize>(ids_[i].size()));
    f.write(reinterpret_cast<const char*>(raw_.data() + static_cast<std::int64_t>(i) * dim_),
            static_cast<std::streamsize>(dim_ * sizeof(float)));
  }
  SS_REQUIRE(f.good(), "short write: " + path);
}

EmbeddingIndex EmbeddingIndex::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SS_CHECK(f.good(), "cannot open index: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  SS_CHECK(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
           "not an index file: " + path);
  auto take32 = [&]() {
    std::uint32_t v{};
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  std::uint32_t version = take32();
  SS_CHECK(version == kVersion, "unsupported index version in " + path);
  EmbeddingIndex idx;
  idx.dim_ = take32();
  std::uint32_t fp_len = take32();
  idx.fingerprint_.resize(fp_len);
  f.read(idx.fingerprint_.data(), fp_len);
  std::uint32_t count = take32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t id_len = take32();
    std::string id(id_len, '\0');
    f.read(id.data(), id_len);
    std::vector<float> raw(static_cast<std::size_t>(idx.dim_));
    f.read(reinterpret_cast<char*>(raw.data()),
           static_cast<std::streamsize>(raw.size() * sizeof(float)));
    SS_CHECK(f.good(), "truncated index: " + path);
    std::vector<double> v = renormalize(raw);
    idx.ids_.push_back(std::move(id));
    idx.raw_.insert(idx.raw_.end(), raw.begin(), raw.end());
    idx.values_.insert(idx.values_.end(), v.begin(), v.end());
  }
  return idx;
}

RetrievalResult knn(const EmbeddingIndex& index, const Tensor& query_emb, int k,
                    const std::vector<std::string>& exclude_ids) {
  SS_CHECK(query_emb.numel() == index.dim(), "query embedding dimension mismatch");
  std::set<std::string> excluded(exclude_ids.begin(), exclude_ids.end());
  std::int64_t present_excluded = 0;
  for (const auto& id : excluded)
    if (index.has(id)) ++present_excluded;
  std::int64_t available = index.size() - present_excluded;
  SS_CHECK(k >= 1 && k <= available,
           "knn: k=" + std::to_string(k) + " exceeds available pool of " +
               std::to_string(available));

  // normalize the query so scores are cosines even for raw inputs
  double s = 0.0;
  for (std::int64_t i = 0; i < query_emb.numel(); ++i) s += query_emb[i] * query_emb[i];
  SS_CHECK(s > 0.0, "knn: query embedding must be nonzero");
  double inv = 1.0 / std::sqrt(s);

  std::vector<std::pair<double, std::int64_t>> scored;
  scored.reserve(static_cast<std::size_t>(index.size()));
  for (std::int64_t i = 0; i < index.size(); ++i) {
    const std::string& id = index.ids()[static_cast<std::size_t>(i)];
    if (excluded.count(id)) continue;
    const double* v = index.vec(i);
    double score = 0.0;
    for (std::int64_t d = 0; d < index.dim(); ++d) score += v[d] * query_emb[d] * inv;
    scored.emplace_back(score, i);
  }
  std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;  // score descending
    return index.ids()[static_cast<std::size_t>(a.second)] <
           index.ids()[static_cast<std::size_t>(b.second)];  // id ascending
  });
  RetrievalResult out;
  out.k = k;
  out.excluded.assign(excluded.begin(), excluded.end());
  for (int i = 0; i < k; ++i)
    out.ranked.emplace_back(index.ids()[static_cast<std::size_t>(scored[static_cast<std::size_t>(i)].second)],
                            scored[static_cast<std::size_t>(i)].first);
  return out;
}

data::Episode self_shot(const std::string& query_id, const Tensor& query_emb,
                        const EmbeddingIndex& index, int k) {
  RetrievalResult r = knn(index, query_emb, k, {query_id});
  data::Episode ep;
  ep.query_id = query_id;
  ep.k = k;
  ep.mode = data::EpisodeMode::SelfShot;
  for (const auto& [id, score] : r.ranked) ep.support_ids.push_back(id);
  return ep;
}

namespace {
Tensor combined_key(const Tensor& query_emb, const data::Episode& ep,
                    const EmbeddingIndex& index) {
  std::int64_t d = index.dim();
  SS_CHECK(query_emb.numel() == d, "query embedding dimension mismatch");
  // renormalized mean of the query embedding and the current supports
  double qs = 0.0;
  for (std::int64_t i = 0; i < d; ++i) qs += query_emb[i] * query_emb[i];
  SS_CHECK(qs > 0.0, "query embedding must be nonzero");
  double qinv = 1.0 / std::sqrt(qs);
  Tensor key({d});
  for (std::int64_t i = 0; i < d; ++i) key[i] = query_emb[i] * qinv;
  for (const auto& sid : ep.support_ids) {
    auto v = index.embedding_of(sid);
    for (std::int64_t i = 0; i < d; ++i) key[i] += v[static_cast<std::size_t>(i)];
  }
  double ks = 0.0;
  for (std::int64_t i = 0; i < d; ++i) ks += key[i] * key[i];
  SS_CHECK(ks > 0.0, "degenerate retrieval key");
  double kinv = 1.0 / std::sqrt(ks);
  for (std::int64_t i = 0; i < d; ++i) key[i] *= kinv;
  return key;
}
}  // namespace

data::Episode extend_supports(const data::Episode& episode, const Tensor& query_emb,
                              const EmbeddingIndex& index, int n_extra) {
  SS_CHECK(!episode.support_ids.empty(), "extend_supports: episode has no supports");
  if (n_extra == 0) return episode;
  SS_CHECK(n_extra > 0, "extend_supports: n_extra must be >= 0");
  Tensor key = combined_key(query_emb, episode, index);
  std::vector<std::string> exclude = episode.support_ids;
  exclude.push_back(episode.query_id);
  RetrievalResult r = knn(index, key, n_extra, exclude);
  data::Episode out = episode;
  for (const auto& [id, score] : r.ranked) out.support_ids.push_back(id);
  out.extra += n_extra;
  return out;
}

data::Episode semi_shot(const data::Episode& oracle_episode, const Tensor& query_emb,
                        const EmbeddingIndex& index, int k_self) {
  SS_CHECK(k_self >= 0, "semi_shot: k_self must be >= 0");
  data::Episode out = oracle_episode;
  out.mode = data::EpisodeMode::Semi;
  if (k_self == 0) return out;
  Tensor key = combined_key(query_emb, oracle_episode, index);
  std::vector<std::string> exclude = oracle_episode.support_ids;
  exclude.push_back(oracle_episode.query_id);
  RetrievalResult r = knn(index, key, k_self, exclude);
  for (const auto& [id, score] : r.ranked) out.support_ids.push_back(id);
  return out;
}

}  // namespace selfshot::retrieve
