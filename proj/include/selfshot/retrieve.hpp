#pragma once

#include <string>
#include <vector>

#include "selfshot/datagen.hpp"
#include "selfshot/tensor.hpp"

namespace selfshot::retrieve {

// Exact cosine kNN over the unlabelled pool. Entries are quantized to f32 at
// append time and renormalized in double, so an index built in memory and one
// reloaded from disk score identically.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  EmbeddingIndex(std::int64_t dim, std::string encoder_fingerprint);

  // Rejects duplicate ids and fingerprint mismatches.
  void append(const std::string& id, const Tensor& embedding,
              const std::string& encoder_fingerprint);

  std::int64_t size() const { return static_cast<std::int64_t>(ids_.size()); }
  std::int64_t dim() const { return dim_; }
  const std::string& fingerprint() const { return fingerprint_; }
  const std::vector<std::string>& ids() const { return ids_; }
  bool has(const std::string& id) const;
  // Renormalized embedding of a member video.
  std::vector<double> embedding_of(const std::string& id) const;

  // Same fingerprint, restricted to the given ids (all must be members);
  // raw payloads are copied bit-exactly.
  EmbeddingIndex subset(const std::vector<std::string>& keep_ids) const;

  void save(const std::string& path) const;
  static EmbeddingIndex load(const std::string& path);

  const double* vec(std::int64_t i) const { return values_.data() + i * dim_; }

 private:
  std::int64_t dim_ = 0;
  std::string fingerprint_;
  std::vector<std::string> ids_;
  std::vector<float> raw_;       // exact file payload
  std::vector<double> values_;   // renormalized doubles used for scoring
  mutable std::map<std::string, std::int64_t> lookup_;
  void build_lookup() const;
};

struct RetrievalResult {
  std::vector<std::pair<std::string, double>> ranked;  // (video id, cosine), non-increasing
  int k = 0;
  std::vector<std::string> excluded;
};

// Top-k by cosine, ties broken by ascending video id, excluded ids never
// returned. Rejects k outside [1, |index| - |present excluded|].
RetrievalResult knn(const EmbeddingIndex& index, const Tensor& query_emb, int k,
                    const std::vector<std::string>& exclude_ids = {});

// Support selection with the query itself as the only key; consults no labels.
// The query is excluded when present in the index.
data::Episode self_shot(const std::string& query_id, const Tensor& query_emb,
                        const EmbeddingIndex& index, int k);

// Appends n_extra supports retrieved with the semi-shot key (renormalized mean
// of the query and current support embeddings), excluding what is already used.
data::Episode extend_supports(const data::Episode& episode, const Tensor& query_emb,
                              const EmbeddingIndex& index, int n_extra);

// Oracle supports seed retrieval of k_self additional self-shot supports.
data::Episode semi_shot(const data::Episode& oracle_episode, const Tensor& query_emb,
                        const EmbeddingIndex& index, int k_self);

}  // namespace selfshot::retrieve
