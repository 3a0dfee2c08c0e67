#include "ragdiff/retrieval.hpp"

#include "ragdiff/error.hpp"
#include "ragdiff/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

namespace fs = std::filesystem;
using namespace ragdiff;

namespace {

// text-only corpus helper (images are irrelevant to the index)
Corpus text_corpus(const std::vector<std::string>& captions) {
    Corpus c;
    c.canvas = 32;
    for (size_t i = 0; i < captions.size(); ++i) {
        ImageTextRecord r;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "d%03d", (int)i);
        r.record_id = buf;
        r.image = Tensor<float>({3, 8, 8});
        for (const auto& tok : tokenize(captions[i])) r.caption.push_back(c.vocab.add(tok));
        c.records.push_back(std::move(r));
    }
    c.rebuild_indices();
    return c;
}

// independent brute-force BM25 oracle (same convention: unique query terms in
// first-occurrence order, multiplied by their query count, IDF floored at 0)
std::vector<double> brute_force_scores(const Corpus& corpus, const std::vector<std::string>& query,
                                       double k1 = 1.2, double b = 0.75) {
    int n = (int)corpus.records.size();
    double avg = 0;
    for (const auto& r : corpus.records) avg += (double)r.caption.size();
    avg /= n;

    std::vector<std::pair<std::string, int>> terms;
    for (const auto& t : query) {
        bool found = false;
        for (auto& [tok, cnt] : terms)
            if (tok == t) {
                ++cnt;
                found = true;
            }
        if (!found) terms.emplace_back(t, 1);
    }

    std::vector<double> scores((size_t)n, 0.0);
    for (const auto& [tok, qtf] : terms) {
        int df = 0;
        for (const auto& r : corpus.records) {
            for (int id : r.caption)
                if (corpus.vocab.token(id) == tok) {
                    ++df;
                    break;
                }
        }
        if (df == 0) continue;
        double idf = std::max(0.0, std::log(((double)n - df + 0.5) / ((double)df + 0.5)));
        if (idf <= 0) continue;
        for (int d = 0; d < n; ++d) {
            const auto& r = corpus.records[(size_t)d];
            int tf = 0;
            for (int id : r.caption)
                if (corpus.vocab.token(id) == tok) ++tf;
            if (tf == 0) continue;
            double len = (double)r.caption.size();
            scores[(size_t)d] +=
                idf * qtf * tf * (k1 + 1.0) / ((double)tf + k1 * (1.0 - b + b * len / avg));
        }
    }
    return scores;
}

std::vector<int> brute_force_top_k(const Corpus& corpus, const std::vector<double>& scores, int k,
                                   const std::string* exclude) {
    std::vector<int> cand;
    for (size_t d = 0; d < scores.size(); ++d) {
        if (scores[d] <= 0) continue;
        if (exclude && corpus.records[d].record_id == *exclude) continue;
        cand.push_back((int)d);
    }
    std::sort(cand.begin(), cand.end(), [&](int a, int bb) {
        if (scores[(size_t)a] != scores[(size_t)bb]) return scores[(size_t)a] > scores[(size_t)bb];
        return corpus.records[(size_t)a].record_id < corpus.records[(size_t)bb].record_id;
    });
    if ((int)cand.size() > k) cand.resize((size_t)k);
    return cand;
}

Corpus random_corpus(RandomStream& rs, int max_docs = 60, int max_len = 15) {
    static const char* vocab[] = {"ash", "bay",  "cod", "dew", "elm", "fig", "gum",  "hop", "ivy", "jay",
                                  "kit", "lark", "moss", "nut", "oak", "pod", "quay", "rye", "sap", "teak"};
    int n = (int)rs.uniform_int(2, max_docs);
    std::vector<std::string> captions;
    for (int i = 0; i < n; ++i) {
        int len = (int)rs.uniform_int(1, max_len);
        std::string cap;
        for (int j = 0; j < len; ++j) cap += std::string(j ? " " : "") + vocab[rs.uniform_int(0, 19)];
        captions.push_back(cap);
    }
    return text_corpus(captions);
}

std::vector<std::string> random_query(RandomStream& rs) {
    static const char* vocab[] = {"ash", "bay",  "cod", "dew", "elm", "fig", "gum",  "hop", "ivy", "jay",
                                  "kit", "lark", "moss", "nut", "oak", "pod", "quay", "rye", "sap", "teak"};
    int len = (int)rs.uniform_int(1, 6);
    std::vector<std::string> q;
    for (int j = 0; j < len; ++j) q.push_back(vocab[rs.uniform_int(0, 19)]);
    return q;
}

}  // namespace

TEST_SUITE_BEGIN("retrieval");

TEST_CASE("single-document corpus scores its own tokens positively") {
    Corpus c = text_corpus({"lone chortai portrait"});
    Bm25Index idx = Bm25Index::build(c);
    // N=1: idf = max(0, ln(0.5/1.5)) floors to 0, so require a bigger corpus
    // for positive idf; with one distinct doc the score must be >= 0 and the
    // doc is the only candidate of a query on its tokens
    CHECK(idx.score({"chortai"}, 0) >= 0.0);

    Corpus c3 = text_corpus({"lone chortai portrait", "red fox", "blue bird"});
    Bm25Index idx3 = Bm25Index::build(c3);
    CHECK(idx3.score({"chortai"}, 0) > 0.0);
    NeighborSet ns = idx3.query_top_k({"chortai"}, 1);
    REQUIRE(ns.neighbors.size() == 1);
    CHECK(ns.neighbors[0].record_id == "d000");
}

TEST_CASE("query term absent from all documents scores zero everywhere") {
    Corpus c = text_corpus({"red fox", "blue bird", "green frog"});
    Bm25Index idx = Bm25Index::build(c);
    for (int d = 0; d < 3; ++d) CHECK(idx.score({"zeppelin"}, d) == 0.0);
    CHECK(idx.query_top_k({"zeppelin"}, 2).neighbors.empty());
}

TEST_CASE("3-document corpus: document with both query terms outranks the rest") {
    Corpus c = text_corpus({"chortai dog race", "dog portrait photo", "mountain lake view"});
    Bm25Index idx = Bm25Index::build(c);
    std::vector<std::string> q = {"chortai", "dog"};
    std::vector<double> brute = brute_force_scores(c, q);
    for (int d = 0; d < 3; ++d) CHECK(idx.score(q, d) == doctest::Approx(brute[(size_t)d]).epsilon(1e-12));
    CHECK(brute[0] > brute[1]);
    CHECK(brute[0] > brute[2]);
    // frozen from the hand-derived oracle: idf(chortai)=ln(2.5/1.5), dog floored
    CHECK(idx.score(q, 0) == doctest::Approx(0.5108256237659907).epsilon(1e-12));

    NeighborSet ns = idx.query_top_k(q, 2);
    REQUIRE(!ns.neighbors.empty());
    CHECK(ns.neighbors[0].record_id == "d000");
}

TEST_CASE("indexed top-k equals brute force on randomized corpora") {
    RandomStream rs(42);
    for (int trial = 0; trial < 150; ++trial) {
        Corpus c = random_corpus(rs);
        Bm25Index idx = Bm25Index::build(c);
        for (int qi = 0; qi < 3; ++qi) {
            std::vector<std::string> q = random_query(rs);
            std::vector<double> brute = brute_force_scores(c, q);
            int k = (int)rs.uniform_int(1, 5);
            const std::string* exclude = nullptr;
            std::string exc;
            if (rs.bernoulli(0.5)) {
                exc = c.records[(size_t)rs.uniform_int(0, (int64_t)c.records.size() - 1)].record_id;
                exclude = &exc;
            }
            NeighborSet got = idx.query_top_k(q, k, exclude);
            std::vector<int> want = brute_force_top_k(c, brute, k, exclude);
            REQUIRE(got.neighbors.size() == want.size());
            for (size_t i = 0; i < want.size(); ++i) {
                CHECK(got.neighbors[i].record_id == c.records[(size_t)want[(size_t)i]].record_id);
                double w = brute[(size_t)want[(size_t)i]];
                CHECK(std::abs(got.neighbors[i].score - w) <= 1e-9 * std::max(1.0, std::abs(w)));
            }
        }
    }
}

TEST_CASE("monotonicity: raising a query term's tf at fixed length never lowers the score") {
    RandomStream rs(77);
    for (int trial = 0; trial < 100; ++trial) {
        Corpus c = random_corpus(rs, 25, 12);
        std::vector<std::string> q = random_query(rs);
        int doc = (int)rs.uniform_int(0, (int64_t)c.records.size() - 1);
        auto& rec = c.records[(size_t)doc];
        if (rec.caption.empty()) continue;
        // replace one token that is not a query term with a query term,
        // keeping the document length (and avgdl) fixed
        int slot = -1;
        for (size_t i = 0; i < rec.caption.size(); ++i) {
            const std::string& tok = c.vocab.token(rec.caption[i]);
            if (std::find(q.begin(), q.end(), tok) == q.end()) {
                slot = (int)i;
                break;
            }
        }
        if (slot < 0) continue;
        double before = brute_force_scores(c, q)[(size_t)doc];
        Corpus mutated = c;
        mutated.records[(size_t)doc].caption[(size_t)slot] = mutated.vocab.add(q[0]);
        double after = brute_force_scores(mutated, q)[(size_t)doc];
        // df can only grow by this edit; idf floor keeps contributions >= 0
        CHECK(after >= before - 1e-12);
        // and the index agrees with the oracle on the mutated corpus
        Bm25Index idx = Bm25Index::build(mutated);
        CHECK(idx.score(q, doc) == doctest::Approx(after).epsilon(1e-12));
    }
}

TEST_CASE("term-level monotonicity of the scoring function in tf") {
    // the tf factor tf (k1+1) / (tf + k1 (1-b+b L/avg)) is increasing in tf
    double k1 = 1.2, b = 0.75;
    for (double norm : {0.4, 1.0, 2.5}) {
        double prev = 0;
        for (int tf = 1; tf <= 15; ++tf) {
            double v = tf * (k1 + 1) / (tf + k1 * (1 - b + b * norm));
            CHECK(v > prev);
            prev = v;
        }
    }
}

TEST_CASE("exclusion: query_top_k never returns exclude_id") {
    RandomStream rs(5);
    for (int trial = 0; trial < 60; ++trial) {
        Corpus c = random_corpus(rs, 30, 10);
        Bm25Index idx = Bm25Index::build(c);
        for (const auto& rec : c.records) {
            NeighborSet ns = idx.query_top_k(c.caption_tokens(rec), 3, &rec.record_id);
            for (const auto& n : ns.neighbors) CHECK(n.record_id != rec.record_id);
        }
    }
}

TEST_CASE("excluding the best hit promotes the runner-up") {
    Corpus c = text_corpus({"husky dog sled", "husky dog", "red cat", "blue bird", "green frog"});
    Bm25Index idx = Bm25Index::build(c);
    std::vector<std::string> q = {"husky", "dog", "sled"};
    NeighborSet full = idx.query_top_k(q, 2);
    REQUIRE(full.neighbors.size() == 2);
    std::string best = full.neighbors[0].record_id;
    NeighborSet excl = idx.query_top_k(q, 2, &best);
    CHECK(excl.neighbors[0].record_id == full.neighbors[1].record_id);
}

TEST_CASE("k larger than eligible records returns all, flagged short") {
    Corpus c = text_corpus({"twin caption here", "twin caption here"});
    Bm25Index idx = Bm25Index::build(c);
    NeighborSet ns = idx.query_top_k({"twin", "caption"}, 2, &c.records[0].record_id);
    CHECK(ns.neighbors.size() <= 1);
    CHECK(ns.short_of_k);
}

TEST_CASE("deterministic tie-break on equal scores is lexicographic") {
    // query terms must stay below df = N/2 or the idf floor zeroes them out
    Corpus c8 = text_corpus({"same words", "same words", "same words", "x y", "x z", "y z", "p q",
                             "p r"});
    Bm25Index idx = Bm25Index::build(c8);
    NeighborSet ns = idx.query_top_k({"same", "words"}, 3);
    REQUIRE(ns.neighbors.size() == 3);
    CHECK(ns.neighbors[0].record_id == "d000");
    CHECK(ns.neighbors[1].record_id == "d001");
    CHECK(ns.neighbors[2].record_id == "d002");
}

TEST_CASE("index persistence round trip reproduces scores and metadata") {
    RandomStream rs(11);
    Corpus c = random_corpus(rs, 40, 12);
    Bm25Index idx = Bm25Index::build(c, {1.2, 0.75}, "test_ref");
    fs::path path = fs::temp_directory_path() / "ragdiff_test_index.bin";
    idx.save(path.string());
    Bm25Index loaded = Bm25Index::load(path.string());
    CHECK(loaded.num_docs() == idx.num_docs());
    CHECK(loaded.avg_doc_length() == doctest::Approx(idx.avg_doc_length()).epsilon(1e-15));
    CHECK(loaded.corpus_ref() == "test_ref");
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::string> q = random_query(rs);
        for (int d = 0; d < loaded.num_docs(); ++d) CHECK(loaded.score(q, d) == idx.score(q, d));
    }
    // corrupted magic is rejected with a version error
    std::ofstream bad(path, std::ios::binary);
    bad << "NOTANIDX";
    bad.close();
    CHECK_THROWS_AS(Bm25Index::load(path.string()), Error);
    fs::remove(path);
}

TEST_CASE("build_index rejects an empty corpus") {
    Corpus empty;
    CHECK_THROWS_AS(Bm25Index::build(empty), Error);
}

TEST_CASE("knn dataset: one triple per training record, self excluded") {
    Corpus c = generate_synthetic_corpus(6, BucketCounts{10, 1, 1}, 32, 5);
    Bm25Index idx = Bm25Index::build(c);
    std::vector<KnnTriple> triples = build_knn_dataset(c, idx, 2);
    CHECK(triples.size() == c.training_indices().size());
    for (const auto& t : triples) {
        CHECK((int)t.neighbors.size() <= 2);
        for (int n : t.neighbors) CHECK(n != t.target);
    }
}

TEST_CASE("knn dataset on duplicated captions keeps the duplicates as neighbors") {
    Corpus c = text_corpus({"same caption here", "same caption here", "same caption here", "odd one out",
                            "another odd duck", "third odd entry", "more filler words", "yet another filler"});
    Bm25Index idx = Bm25Index::build(c);
    std::vector<KnnTriple> triples = build_knn_dataset(c, idx, 2);
    // records 0..2 share a caption; their neighbors are the other duplicates
    for (int i = 0; i < 3; ++i) {
        const auto& t = triples[(size_t)i];
        CHECK(t.neighbors.size() == 2);
        for (int n : t.neighbors) {
            CHECK(n != t.target);
            CHECK(n <= 2);
        }
    }
}

TEST_CASE("knn dataset persistence round trip") {
    Corpus c = generate_synthetic_corpus(6, BucketCounts{10, 1, 1}, 32, 5);
    Bm25Index idx = Bm25Index::build(c);
    std::vector<KnnTriple> triples = build_knn_dataset(c, idx, 2);
    fs::path path = fs::temp_directory_path() / "ragdiff_test_knn.tsv";
    save_knn_dataset(triples, c, path.string());
    std::vector<KnnTriple> loaded = load_knn_dataset(c, path.string());
    REQUIRE(loaded.size() == triples.size());
    for (size_t i = 0; i < triples.size(); ++i) {
        CHECK(loaded[i].target == triples[i].target);
        CHECK(loaded[i].neighbors == triples[i].neighbors);
    }
    fs::remove(path);
}

TEST_SUITE_END();
