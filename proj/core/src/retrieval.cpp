#include "ragdiff/retrieval.hpp"

#include "ragdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <unordered_map>

namespace ragdiff {

namespace {

constexpr char kMagic[8] = {'R', 'G', 'D', 'F', 'I', 'D', 'X', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
    out.write((const char*)&v, sizeof(T));
}

template <typename T>
T take(std::istream& in) {
    T v{};
    in.read((char*)&v, sizeof(T));
    return v;
}

void put_str(std::ostream& out, const std::string& s) {
    put<uint32_t>(out, (uint32_t)s.size());
    out.write(s.data(), (std::streamsize)s.size());
}

std::string take_str(std::istream& in) {
    uint32_t n = take<uint32_t>(in);
    std::string s((size_t)n, '\0');
    in.read(s.data(), (std::streamsize)n);
    return s;
}

// unique query terms with multiplicities, in first-occurrence order (this
// fixes the summation order, so indexed and brute-force scores agree bitwise)
std::vector<std::pair<std::string, int>> query_terms(const std::vector<std::string>& q) {
    std::vector<std::pair<std::string, int>> terms;
    for (const auto& t : q) {
        bool found = false;
        for (auto& [tok, n] : terms)
            if (tok == t) {
                ++n;
                found = true;
                break;
            }
        if (!found) terms.emplace_back(t, 1);
    }
    return terms;
}

}  // namespace

Bm25Index Bm25Index::build(const Corpus& corpus, Bm25Params params, std::string corpus_ref) {
    require(!corpus.records.empty(), kUsageError, "build_index: empty corpus");
    Bm25Index idx;
    idx.params_ = params;
    idx.corpus_ref_ = std::move(corpus_ref);
    idx.doc_ids_.reserve(corpus.records.size());
    idx.doc_lengths_.reserve(corpus.records.size());
    int64_t total_len = 0;
    for (const auto& r : corpus.records) {
        int doc = (int)idx.doc_ids_.size();
        idx.doc_ids_.push_back(r.record_id);
        idx.doc_lengths_.push_back((int)r.caption.size());
        total_len += (int64_t)r.caption.size();
        std::unordered_map<std::string, int> tf;
        for (int tok_id : r.caption) ++tf[corpus.vocab.token(tok_id)];
        for (const auto& [tok, n] : tf) idx.postings_[tok].push_back({doc, n});
    }
    for (auto& [tok, plist] : idx.postings_)
        std::sort(plist.begin(), plist.end(), [](const Posting& a, const Posting& b) { return a.doc < b.doc; });
    idx.avg_len_ = (double)total_len / (double)corpus.records.size();
    return idx;
}

double Bm25Index::idf(const std::string& token) const {
    auto it = postings_.find(token);
    size_t df = it == postings_.end() ? 0 : it->second.size();
    if (df == 0) return 0.0;
    double n = (double)doc_ids_.size();
    return std::max(0.0, std::log((n - (double)df + 0.5) / ((double)df + 0.5)));
}

double Bm25Index::score(const std::vector<std::string>& query_tokens, int doc) const {
    double s = 0;
    double len = (double)doc_lengths_[(size_t)doc];
    for (const auto& [tok, qtf] : query_terms(query_tokens)) {
        auto it = postings_.find(tok);
        if (it == postings_.end()) continue;
        double w = idf(tok);
        if (w <= 0) continue;
        int tf = 0;
        for (const auto& p : it->second)
            if (p.doc == doc) {
                tf = p.tf;
                break;
            }
        if (tf == 0) continue;
        double denom = (double)tf + params_.k1 * (1.0 - params_.b + params_.b * len / avg_len_);
        s += w * (double)qtf * (double)tf * (params_.k1 + 1.0) / denom;
    }
    return s;
}

NeighborSet Bm25Index::query_top_k(const std::vector<std::string>& query_tokens, int k,
                                   const std::string* exclude_id) const {
    require(k >= 1, kUsageError, "query_top_k: k must be >= 1");
    std::vector<double> scores(doc_ids_.size(), 0.0);
    for (const auto& [tok, qtf] : query_terms(query_tokens)) {
        auto it = postings_.find(tok);
        if (it == postings_.end()) continue;
        double w = idf(tok);
        if (w <= 0) continue;
        for (const auto& p : it->second) {
            double len = (double)doc_lengths_[(size_t)p.doc];
            double denom = (double)p.tf + params_.k1 * (1.0 - params_.b + params_.b * len / avg_len_);
            scores[(size_t)p.doc] += w * (double)qtf * (double)p.tf * (params_.k1 + 1.0) / denom;
        }
    }
    std::vector<int> cand;
    for (size_t d = 0; d < scores.size(); ++d) {
        if (scores[d] <= 0) continue;
        if (exclude_id && doc_ids_[d] == *exclude_id) continue;
        cand.push_back((int)d);
    }
    auto better = [&](int a, int b) {
        if (scores[(size_t)a] != scores[(size_t)b]) return scores[(size_t)a] > scores[(size_t)b];
        return doc_ids_[(size_t)a] < doc_ids_[(size_t)b];
    };
    int take_n = std::min<int>(k, (int)cand.size());
    std::partial_sort(cand.begin(), cand.begin() + take_n, cand.end(), better);
    NeighborSet out;
    out.short_of_k = take_n < k;
    for (int i = 0; i < take_n; ++i)
        out.neighbors.push_back({doc_ids_[(size_t)cand[(size_t)i]], scores[(size_t)cand[(size_t)i]]});
    return out;
}

void Bm25Index::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require((bool)out, kDataError, "cannot write index: " + path);
    out.write(kMagic, 8);
    put<uint32_t>(out, kVersion);
    put<double>(out, params_.k1);
    put<double>(out, params_.b);
    put_str(out, corpus_ref_);
    put<uint32_t>(out, (uint32_t)doc_ids_.size());
    put<uint32_t>(out, (uint32_t)postings_.size());
    for (size_t d = 0; d < doc_ids_.size(); ++d) {
        put_str(out, doc_ids_[d]);
        put<uint32_t>(out, (uint32_t)doc_lengths_[d]);
    }
    for (const auto& [tok, plist] : postings_) {
        put_str(out, tok);
        put<uint32_t>(out, (uint32_t)plist.size());
        for (const auto& p : plist) {
            put<uint32_t>(out, (uint32_t)p.doc);
            put<uint32_t>(out, (uint32_t)p.tf);
        }
    }
    require((bool)out, kDataError, "index write failed: " + path);
}

Bm25Index Bm25Index::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise_missing("index not found: " + path);
    char magic[8];
    in.read(magic, 8);
    require(in.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0, kVersionError,
            "not a retrieval index file: " + path);
    uint32_t version = take<uint32_t>(in);
    require(version == kVersion, kVersionError, "unsupported index version");
    Bm25Index idx;
    idx.params_.k1 = take<double>(in);
    idx.params_.b = take<double>(in);
    idx.corpus_ref_ = take_str(in);
    uint32_t n_docs = take<uint32_t>(in);
    uint32_t n_terms = take<uint32_t>(in);
    int64_t total = 0;
    for (uint32_t d = 0; d < n_docs; ++d) {
        idx.doc_ids_.push_back(take_str(in));
        int len = (int)take<uint32_t>(in);
        idx.doc_lengths_.push_back(len);
        total += len;
    }
    for (uint32_t t = 0; t < n_terms; ++t) {
        std::string tok = take_str(in);
        uint32_t np = take<uint32_t>(in);
        auto& plist = idx.postings_[tok];
        for (uint32_t i = 0; i < np; ++i) {
            Posting p;
            p.doc = (int)take<uint32_t>(in);
            p.tf = (int)take<uint32_t>(in);
            require(p.doc >= 0 && p.doc < (int)n_docs, kDataError, "index postings reference unknown doc");
            plist.push_back(p);
        }
    }
    require((bool)in, kDataError, "truncated index file: " + path);
    idx.avg_len_ = n_docs ? (double)total / (double)n_docs : 0.0;
    return idx;
}

std::vector<KnnTriple> build_knn_dataset(const Corpus& corpus, const Bm25Index& index, int k) {
    require(k >= 1, kUsageError, "build_knn_dataset: k must be >= 1");
    std::vector<KnnTriple> out;
    for (int idx : corpus.training_indices()) {
        const auto& r = corpus.records[(size_t)idx];
        NeighborSet ns = index.query_top_k(corpus.caption_tokens(r), k, &r.record_id);
        KnnTriple triple;
        triple.target = idx;
        triple.short_of_k = ns.short_of_k;
        for (const auto& n : ns.neighbors) {
            triple.neighbors.push_back(corpus.record_index.at(n.record_id));
            triple.scores.push_back(n.score);
        }
        out.push_back(std::move(triple));
    }
    return out;
}

void save_knn_dataset(const std::vector<KnnTriple>& triples, const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    require((bool)out, kDataError, "cannot write knn dataset: " + path);
    for (const auto& t : triples) {
        out << corpus.records[(size_t)t.target].record_id;
        for (size_t i = 0; i < t.neighbors.size(); ++i)
            out << '\t' << corpus.records[(size_t)t.neighbors[i]].record_id << '\t' << t.scores[i];
        out << '\n';
    }
}

std::vector<KnnTriple> load_knn_dataset(const Corpus& corpus, const std::string& path) {
    std::ifstream in(path);
    if (!in) raise_missing("knn dataset not found: " + path);
    std::vector<KnnTriple> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        KnnTriple t;
        require((bool)std::getline(ss, field, '\t'), kDataError, "malformed knn line");
        t.target = corpus.record_index.at(field);
        while (std::getline(ss, field, '\t')) {
            t.neighbors.push_back(corpus.record_index.at(field));
            std::getline(ss, field, '\t');
            t.scores.push_back(std::stod(field));
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace ragdiff
