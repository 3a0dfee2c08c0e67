#pragma once

#include "ragdiff/corpus.hpp"

#include <map>
#include <string>
#include <vector>

namespace ragdiff {

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct ScoredNeighbor {
    std::string record_id;
    double score = 0;
};

struct NeighborSet {
    std::vector<ScoredNeighbor> neighbors;  // descending score, record_id breaks ties
    bool short_of_k = false;                // fewer eligible records than requested
};

/// Okapi BM25 inverted index over record captions. IDF is floored at zero so
/// scores are always >= 0. Immutable once built; safe for concurrent queries.
class Bm25Index {
  public:
    static Bm25Index build(const Corpus& corpus, Bm25Params params = {}, std::string corpus_ref = "");

    /// Top-k records by BM25 score (score > 0 only), excluding `exclude_id`
    /// if given. Ties break on lexicographic record_id.
    NeighborSet query_top_k(const std::vector<std::string>& query_tokens, int k,
                            const std::string* exclude_id = nullptr) const;

    /// Score of one document for a query (0 if no term matches).
    double score(const std::vector<std::string>& query_tokens, int doc) const;

    int num_docs() const { return (int)doc_ids_.size(); }
    const std::string& doc_id(int i) const { return doc_ids_[(size_t)i]; }
    double avg_doc_length() const { return avg_len_; }
    const Bm25Params& params() const { return params_; }
    const std::string& corpus_ref() const { return corpus_ref_; }

    double idf(const std::string& token) const;

    void save(const std::string& path) const;
    static Bm25Index load(const std::string& path);

  private:
    struct Posting {
        int doc = 0;
        int tf = 0;
    };
    Bm25Params params_;
    std::string corpus_ref_;
    std::vector<std::string> doc_ids_;
    std::vector<int> doc_lengths_;
    double avg_len_ = 0;
    std::map<std::string, std::vector<Posting>> postings_;  // ordered for stable serialization
};

/// One training example: a target record plus its top-k retrieved neighbors
/// (the target itself always excluded).
struct KnnTriple {
    int target = 0;                  // index into corpus.records
    std::vector<int> neighbors;      // indices into corpus.records
    std::vector<double> scores;
    bool short_of_k = false;
};

/// Builds (image, text, retrieval) triples for every training record, using
/// query_top_k with the target excluded from its own neighbor set.
std::vector<KnnTriple> build_knn_dataset(const Corpus& corpus, const Bm25Index& index, int k);

void save_knn_dataset(const std::vector<KnnTriple>& triples, const Corpus& corpus, const std::string& path);
std::vector<KnnTriple> load_knn_dataset(const Corpus& corpus, const std::string& path);

}  // namespace ragdiff
