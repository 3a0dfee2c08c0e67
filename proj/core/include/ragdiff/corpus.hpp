#pragma once

#include "ragdiff/tensor.hpp"

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace ragdiff {

enum class Shape { circle, square, triangle, diamond, pentagon, hexagon, octagon, cross };
enum class Pattern { solid, stripes, dots, ring };
enum class Bucket { frequent, infrequent, unseen };

inline constexpr int kNumShapes = 8;
inline constexpr int kNumGlyphColors = 12;
inline constexpr int kNumPatterns = 4;
inline constexpr int kNumSceneColors = 6;
inline constexpr int kNumPositions = 5;
inline constexpr int kNumCaptionTemplates = 5;
inline constexpr int kMaxCaptionTokens = 15;

const char* shape_name(Shape s);
const char* pattern_name(Pattern p);
const char* bucket_name(Bucket b);
const char* glyph_color_name(int idx);
const char* scene_color_name(int idx);
const char* position_name(int idx);
std::array<float, 3> glyph_color_rgb(int idx);
std::array<float, 3> scene_color_rgb(int idx);
std::array<float, 3> canonical_background_rgb();  // the "gray" prototype background

/// One synthetic entity: a unique (shape, color, pattern) appearance plus a
/// private name token that captions refer to it by.
struct EntitySpec {
    std::string entity_id;
    std::string name_token;
    Shape shape = Shape::circle;
    int color = 0;  // glyph palette index
    Pattern pattern = Pattern::solid;
    Bucket bucket = Bucket::frequent;
};

struct SceneSpec {
    int background = 0;  // scene palette index
    int position = 0;    // 0=center 1=left 2=right 3=top 4=bottom
    double scale = 0.5;  // glyph extent as a fraction of the canvas
};

struct ImageTextRecord {
    std::string record_id;
    Tensor<float> image;  // 3xHxW in [-1, 1]
    std::vector<int> caption;
    std::optional<std::string> entity_id;
    std::optional<SceneSpec> scene;
    std::optional<Bucket> bucket;
};

class Vocab {
  public:
    int add(const std::string& tok);
    int id_of(const std::string& tok) const;  // -1 if absent
    int require_id(const std::string& tok) const;
    const std::string& token(int id) const { return tokens_.at((size_t)id); }
    int size() const { return (int)tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

struct Corpus {
    std::vector<ImageTextRecord> records;
    Vocab vocab;
    std::vector<EntitySpec> entities;
    int canvas = 32;

    std::unordered_map<std::string, int> record_index;
    std::unordered_map<std::string, int> entity_index;

    void rebuild_indices();
    void validate() const;

    const ImageTextRecord& record(const std::string& id) const;
    const EntitySpec& entity(const std::string& id) const;

    /// Records eligible as training targets (everything except unseen-entity
    /// records, which exist only as knowledge-base entries).
    std::vector<int> training_indices() const;

    /// Knowledge-base records of one entity, canonical prototype first.
    std::vector<int> kb_indices_for_entity(const std::string& entity_id) const;

    std::vector<std::string> caption_tokens(const ImageTextRecord& r) const;
    std::string caption_text(const ImageTextRecord& r) const;
};

std::vector<std::string> tokenize(const std::string& text);

/// Caption from one of the five fixed templates. Position/background words
/// appear verbatim; `background` < 0 means the canonical gray background.
std::vector<std::string> caption_from_template(int template_idx, const std::string& name_token, int background,
                                               int position);

struct BucketCounts {
    int frequent = 80;    // scene images per frequent entity
    int infrequent = 8;   // scene images per infrequent entity
    int unseen = 2;       // knowledge-base records per unseen entity (incl. prototype)
};

/// Entity split for n entities: top 50% frequent, ~20% unseen, rest infrequent.
struct EntitySplit {
    int frequent = 0, infrequent = 0, unseen = 0;
};
EntitySplit split_entities(int n_entities);

Corpus generate_synthetic_corpus(int n_entities, const BucketCounts& images_per_bucket, int canvas, uint64_t seed);

/// Scale at which an entity's canonical prototype is rendered: chosen per
/// entity so every prototype covers a near-equal number of colored pixels
/// (keeps the nearest-prototype classifier unbiased on featureless input).
double canonical_scale(const EntitySpec& e, int canvas);

Tensor<float> render_record_image(const EntitySpec& e, const SceneSpec& scene, int canvas);
Tensor<float> render_prototype(const EntitySpec& e, int canvas);

/// Load an external manifest, applying the corpus filters: captions longer
/// than 15 tokens, captions containing date-like or letter-digit-id-like
/// tokens, and unreadable images are dropped (the first two counted, the
/// last warned). Fails hard if nothing survives.
struct IngestStats {
    int kept = 0, dropped_length = 0, dropped_date_or_id = 0, skipped_unreadable = 0, skipped_other = 0;
};
Corpus ingest_corpus(const std::string& manifest_path, IngestStats* stats = nullptr);

void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace ragdiff
