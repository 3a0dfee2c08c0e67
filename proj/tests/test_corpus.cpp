#include "ragdiff/corpus.hpp"

#include "ragdiff/error.hpp"
#include "ragdiff/png_io.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;
using namespace ragdiff;

namespace {
Corpus small_corpus(uint64_t seed = 7) {
    return generate_synthetic_corpus(10, BucketCounts{20, 2, 2}, 32, seed);
}

std::string temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("ragdiff_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}
}  // namespace

TEST_SUITE_BEGIN("corpus");

TEST_CASE("same seed twice gives byte-identical corpora") {
    Corpus a = small_corpus(7), b = small_corpus(7);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].record_id == b.records[i].record_id);
        CHECK(a.records[i].caption == b.records[i].caption);
        CHECK(bit_equal(a.records[i].image, b.records[i].image));
    }
    // and identical bytes on disk
    std::string da = temp_dir("det_a"), db = temp_dir("det_b");
    save_corpus(a, da);
    save_corpus(b, db);
    for (const char* f : {"manifest.tsv", "vocab.txt", "entities.tsv", "images/r00000.png",
                          "images/r00021.png"}) {
        std::ifstream fa(fs::path(da) / f, std::ios::binary), fb(fs::path(db) / f, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(fa)), {});
        std::string sb((std::istreambuf_iterator<char>(fb)), {});
        CHECK(sa == sb);
        CHECK(!sa.empty());
    }
    fs::remove_all(da);
    fs::remove_all(db);
}

TEST_CASE("different seeds differ") {
    Corpus a = small_corpus(7), b = small_corpus(8);
    bool any_diff = false;
    for (size_t i = 0; i < std::min(a.records.size(), b.records.size()); ++i)
        if (a.records[i].caption != b.records[i].caption) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("bucket split: 10 entities -> 5 frequent, 3 infrequent, 2 unseen") {
    EntitySplit s = split_entities(10);
    CHECK(s.frequent == 5);
    CHECK(s.infrequent == 3);
    CHECK(s.unseen == 2);

    Corpus c = small_corpus();
    int buckets[3] = {0, 0, 0};
    for (const auto& e : c.entities) ++buckets[(int)e.bucket];
    CHECK(buckets[0] == 5);
    CHECK(buckets[1] == 3);
    CHECK(buckets[2] == 2);

    // no unseen entity appears as a training target
    std::set<std::string> unseen_ids;
    for (const auto& e : c.entities)
        if (e.bucket == Bucket::unseen) unseen_ids.insert(e.entity_id);
    for (int idx : c.training_indices()) {
        const auto& r = c.records[(size_t)idx];
        if (r.entity_id) CHECK(!unseen_ids.count(*r.entity_id));
    }
    // unseen entities still have at least one knowledge-base record
    for (const auto& id : unseen_ids) CHECK(c.kb_indices_for_entity(id).size() >= 1);
}

TEST_CASE("rendering is deterministic and prototype matches the canonical record") {
    Corpus c = small_corpus();
    const EntitySpec& e = c.entities[2];
    SceneSpec sc{3, 1, 0.44};
    CHECK(bit_equal(render_record_image(e, sc, 32), render_record_image(e, sc, 32)));
    CHECK(bit_equal(render_prototype(e, 32), render_prototype(e, 32)));

    // the corpus's canonical record is the prototype, pixel for pixel
    std::vector<int> kb = c.kb_indices_for_entity(e.entity_id);
    REQUIRE(!kb.empty());
    const auto& proto_record = c.records[(size_t)kb[0]];
    CHECK(!proto_record.scene.has_value());
    CHECK(mse(proto_record.image, render_prototype(e, 32)) == 0.0);
}

TEST_CASE("all prototype pairs differ in at least 1% of pixels") {
    Corpus c = generate_synthetic_corpus(24, BucketCounts{20, 2, 2}, 32, 924);
    std::vector<Tensor<float>> protos;
    for (const auto& e : c.entities) protos.push_back(render_prototype(e, 32));
    int64_t pixels = 32 * 32;
    for (size_t i = 0; i < protos.size(); ++i)
        for (size_t j = i + 1; j < protos.size(); ++j) {
            int diff = 0;
            for (int p = 0; p < pixels; ++p) {
                for (int ch = 0; ch < 3; ++ch)
                    if (protos[i][ch * pixels + p] != protos[j][ch * pixels + p]) {
                        ++diff;
                        break;
                    }
            }
            INFO("pair ", i, ",", j);
            CHECK((double)diff / (double)pixels >= 0.01);
        }
}

TEST_CASE("appearance map is injective and canonical scales stay in range") {
    Corpus c = generate_synthetic_corpus(40, BucketCounts{10, 1, 1}, 32, 3);
    std::set<std::tuple<int, int, int>> combos;
    for (const auto& e : c.entities) {
        CHECK(combos.insert({(int)e.shape, e.color, (int)e.pattern}).second);
        for (int canvas : {32, 64}) {
            double s = canonical_scale(e, canvas);
            CHECK(s >= 0.3);
            CHECK(s <= 0.7);
        }
    }
}

TEST_CASE("captions stay within 15 tokens and mention scene words verbatim") {
    Corpus c = small_corpus();
    for (const auto& r : c.records) {
        CHECK((int)r.caption.size() <= kMaxCaptionTokens);
        if (r.scene) {
            std::vector<std::string> toks = c.caption_tokens(r);
            bool has_bg = false, has_pos = false;
            for (const auto& t : toks) {
                if (t == scene_color_name(r.scene->background)) has_bg = true;
                if (t == position_name(r.scene->position)) has_pos = true;
            }
            CHECK(has_bg);
            CHECK(has_pos);
        }
    }
    // closed template grammar stays under a small vocabulary
    CHECK(c.vocab.size() <= 256);
}

TEST_CASE("generator preconditions are enforced") {
    CHECK_THROWS_AS(generate_synthetic_corpus(2, BucketCounts{20, 2, 2}, 32, 1), Error);
    CHECK_THROWS_AS(generate_synthetic_corpus(10, BucketCounts{20, 2, 2}, 48, 1), Error);
    CHECK_THROWS_AS(generate_synthetic_corpus(10, BucketCounts{20, 2, 2}, 31, 1), Error);
    // Zipf-like split: frequent must get >= 10x the infrequent images
    CHECK_THROWS_AS(generate_synthetic_corpus(10, BucketCounts{15, 2, 2}, 32, 1), Error);
}

TEST_CASE("save/load round trip preserves structure (images to 8-bit quantization)") {
    Corpus c = small_corpus();
    std::string dir = temp_dir("roundtrip");
    save_corpus(c, dir);
    Corpus loaded = load_corpus(dir);
    REQUIRE(loaded.records.size() == c.records.size());
    CHECK(loaded.entities.size() == c.entities.size());
    CHECK(loaded.vocab.size() == c.vocab.size());
    for (size_t i = 0; i < c.records.size(); ++i) {
        CHECK(loaded.records[i].record_id == c.records[i].record_id);
        CHECK(loaded.records[i].caption == c.records[i].caption);
        CHECK(loaded.records[i].entity_id == c.records[i].entity_id);
        CHECK(max_abs_diff(loaded.records[i].image, c.records[i].image) <= 1.0f / 127.0f);
    }
    fs::remove_all(dir);
}

TEST_CASE("ingest applies the caption filters") {
    std::string dir = temp_dir("ingest");
    // one valid image reused by several records
    Tensor<float> img({3, 32, 32}, 0.25f);
    write_png((fs::path(dir) / "ok.png").string(), img);
    std::ofstream m(fs::path(dir) / "manifest.tsv");
    m << "r1\tred fox statue\tok.png\t-\t-\n";                                        // kept
    m << "r2\ta b c d e f g h i j k l m n o p\tok.png\t-\t-\n";                       // 16 tokens
    m << "r3\tborn 1974-03-02 in town\tok.png\t-\t-\n";                               // date token
    m << "r4\tcatalog item q12345 shown\tok.png\t-\t-\n";                             // letter-digit id
    m << "r5\ta b c d e f g h i j k l m n o\tok.png\t-\t-\n";                         // 15 tokens, kept
    m << "r6\tmissing image\tgone.png\t-\t-\n";                                       // unreadable
    m.close();

    IngestStats stats;
    Corpus c = ingest_corpus((fs::path(dir) / "manifest.tsv").string(), &stats);
    CHECK(stats.kept == 2);
    CHECK(stats.dropped_length == 1);
    CHECK(stats.dropped_date_or_id == 2);
    CHECK(stats.skipped_unreadable == 1);
    CHECK(c.records.size() == 2);
    CHECK(c.records[0].record_id == "r1");
    CHECK(c.records[1].record_id == "r5");

    // nothing survives -> hard error
    std::ofstream m2(fs::path(dir) / "empty.tsv");
    m2 << "r1\ta b c d e f g h i j k l m n o p\tok.png\t-\t-\n";
    m2.close();
    CHECK_THROWS_AS(ingest_corpus((fs::path(dir) / "empty.tsv").string()), Error);
    CHECK_THROWS_AS(ingest_corpus((fs::path(dir) / "nope.tsv").string()), Error);
    fs::remove_all(dir);
}

TEST_CASE("caption templates fill placeholders verbatim") {
    auto toks = caption_from_template(0, "zarbok", 2, 1);
    std::string joined;
    for (const auto& t : toks) joined += t + " ";
    CHECK(joined == "a figure named zarbok on a mint background at the left ");
    auto canonical = caption_from_template(0, "zarbok", -1, 0);
    std::string cjoined;
    for (const auto& t : canonical) cjoined += t + " ";
    CHECK(cjoined == "a figure named zarbok on a gray background at the center ");
}

TEST_SUITE_END();
