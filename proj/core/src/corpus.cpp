#include "ragdiff/corpus.hpp"

#include "ragdiff/error.hpp"
#include "ragdiff/png_io.hpp"
#include "ragdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace ragdiff {

namespace {

const char* kShapeNames[kNumShapes] = {"circle", "square",  "triangle", "diamond",
                                       "pentagon", "hexagon", "octagon",  "cross"};
const char* kPatternNames[kNumPatterns] = {"solid", "stripes", "dots", "ring"};
const char* kBucketNames[3] = {"frequent", "infrequent", "unseen"};

// glyph palette: every channel in {-1, 0, +1} with squared norm 2, so all
// saturated colors carry equal pixel energy
const float kGlyphRgb[kNumGlyphColors][3] = {
    {1, 1, 0},  {1, 0, 1},  {0, 1, 1},  {1, -1, 0},  {1, 0, -1},  {0, 1, -1},
    {-1, 1, 0}, {-1, 0, 1}, {0, -1, 1}, {-1, -1, 0}, {-1, 0, -1}, {0, -1, -1},
};
const char* kGlyphColorNames[kNumGlyphColors] = {"yellow", "magenta", "cyan",  "crimson", "orange", "chartreuse",
                                                 "spring", "azure",   "violet", "navy",    "green",  "maroon"};

// scene backgrounds: one +-0.8 axis point each, symmetric about the origin so
// featureless input is equally far from every class
const float kSceneRgb[kNumSceneColors][3] = {
    {0.8f, 0, 0}, {-0.8f, 0, 0}, {0, 0.8f, 0}, {0, -0.8f, 0}, {0, 0, 0.8f}, {0, 0, -0.8f},
};
const char* kSceneColorNames[kNumSceneColors] = {"rose", "teal", "mint", "plum", "sky", "olive"};

const char* kPositionNames[kNumPositions] = {"center", "left", "right", "top", "bottom"};

const char* kTemplates[kNumCaptionTemplates] = {
    "a figure named {e} on a {bg} background at the {pos}",
    "the figure {e} shown on a {bg} background at the {pos}",
    "{e} drawn on a {bg} background near the {pos}",
    "an image of {e} with a {bg} background at the {pos}",
    "{e} on a {bg} background positioned at the {pos}",
};

// unit-square area fraction per shape, used by the analytic first guess of
// the canonical scale
double shape_area_fraction(Shape s) {
    switch (s) {
        case Shape::circle: return 0.7854;
        case Shape::square: return 1.0;
        case Shape::triangle: return 0.5;
        case Shape::diamond: return 0.5;
        case Shape::pentagon: return 0.5945;
        case Shape::hexagon: return 0.6495;
        case Shape::octagon: return 0.7071;
        case Shape::cross: return 0.51;
    }
    return 1.0;
}

double pattern_coverage(Pattern p) {
    switch (p) {
        case Pattern::solid: return 1.0;
        case Pattern::stripes: return 0.6;
        case Pattern::dots: return 4.0 / 9.0;
        case Pattern::ring: return 1.0 - 0.55 * 0.55;
    }
    return 1.0;
}

bool inside_regular_polygon(double u, double v, int n, double rot) {
    // counter-clockwise vertices on the unit circle; inside = left of every edge
    for (int i = 0; i < n; ++i) {
        double a0 = rot + 2.0 * M_PI * i / n;
        double a1 = rot + 2.0 * M_PI * (i + 1) / n;
        double ex = std::cos(a1) - std::cos(a0);
        double ey = std::sin(a1) - std::sin(a0);
        double px = u - std::cos(a0);
        double py = v - std::sin(a0);
        if (ex * py - ey * px < 0) return false;
    }
    return true;
}

bool inside_shape(Shape s, double u, double v) {
    switch (s) {
        case Shape::circle: return u * u + v * v <= 1.0;
        case Shape::square: return std::max(std::abs(u), std::abs(v)) <= 1.0;
        case Shape::triangle: {
            // apex up: (0,-1), (-1,1), (1,1)   (v grows downward on canvas)
            if (v > 1.0 || v < -1.0) return false;
            double half = (v + 1.0) / 2.0;
            return std::abs(u) <= half;
        }
        case Shape::diamond: return std::abs(u) + std::abs(v) <= 1.0;
        case Shape::pentagon: return inside_regular_polygon(u, v, 5, -M_PI / 2);
        case Shape::hexagon: return inside_regular_polygon(u, v, 6, 0.0);
        case Shape::octagon: return inside_regular_polygon(u, v, 8, M_PI / 8);
        case Shape::cross: {
            double a = 0.3;
            return (std::abs(u) <= a && std::abs(v) <= 1.0) || (std::abs(v) <= a && std::abs(u) <= 1.0);
        }
    }
    return false;
}

bool pattern_on(Pattern p, Shape s, double u, double v, int px, int py) {
    switch (p) {
        case Pattern::solid: return true;
        case Pattern::stripes: return ((px + py) % 5 + 5) % 5 < 3;
        case Pattern::dots: return (px % 3 + 3) % 3 < 2 && (py % 3 + 3) % 3 < 2;
        case Pattern::ring: return !inside_shape(s, u / 0.55, v / 0.55);
    }
    return true;
}

struct GlyphPlacement {
    double cx, cy, half_extent;
    int bbox_x0, bbox_y0;
};

GlyphPlacement place_glyph(const SceneSpec& scene, int canvas) {
    double off = 5.0 * canvas / 32.0;
    double cx = canvas / 2.0, cy = canvas / 2.0;
    switch (scene.position) {
        case 1: cx -= off; break;
        case 2: cx += off; break;
        case 3: cy -= off; break;
        case 4: cy += off; break;
        default: break;
    }
    double e = scene.scale * canvas / 2.0;
    return {cx, cy, e, (int)std::floor(cx - e), (int)std::floor(cy - e)};
}

int count_glyph_pixels(const EntitySpec& ent, const SceneSpec& scene, int canvas) {
    GlyphPlacement g = place_glyph(scene, canvas);
    int n = 0;
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            double u = (x + 0.5 - g.cx) / g.half_extent;
            double v = (y + 0.5 - g.cy) / g.half_extent;
            if (std::abs(u) > 1.0 || std::abs(v) > 1.0) continue;
            if (inside_shape(ent.shape, u, v) &&
                pattern_on(ent.pattern, ent.shape, u, v, x - g.bbox_x0, y - g.bbox_y0))
                ++n;
        }
    return n;
}

Tensor<float> render_scene(const EntitySpec& ent, const SceneSpec& scene, int canvas,
                           const std::array<float, 3>& bg) {
    Tensor<float> img({3, canvas, canvas});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < canvas * canvas; ++i) img[(int64_t)c * canvas * canvas + i] = bg[(size_t)c];
    GlyphPlacement g = place_glyph(scene, canvas);
    const float* rgb = kGlyphRgb[ent.color];
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x) {
            double u = (x + 0.5 - g.cx) / g.half_extent;
            double v = (y + 0.5 - g.cy) / g.half_extent;
            if (std::abs(u) > 1.0 || std::abs(v) > 1.0) continue;
            if (inside_shape(ent.shape, u, v) &&
                pattern_on(ent.pattern, ent.shape, u, v, x - g.bbox_x0, y - g.bbox_y0))
                for (int c = 0; c < 3; ++c) img[((int64_t)c * canvas + y) * canvas + x] = rgb[c];
        }
    return img;
}

std::string make_name_token(RandomStream& rs, const std::set<std::string>& taken) {
    static const char cons[] = "bdfgklmnprstvz";
    static const char vow[] = "aeiou";
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::string n;
        n += cons[rs.uniform_int(0, 13)];
        n += vow[rs.uniform_int(0, 4)];
        n += cons[rs.uniform_int(0, 13)];
        n += vow[rs.uniform_int(0, 4)];
        n += cons[rs.uniform_int(0, 13)];
        if (!taken.count(n)) return n;
    }
    raise_data("could not generate a unique entity name token");
}

std::vector<std::string> base_vocab_words() {
    std::vector<std::string> words = {"a",   "an",        "the",       "figure", "image",      "of",     "named",
                                      "shown", "drawn",   "with",      "on",     "near",       "positioned",
                                      "at",  "background", "gray"};
    for (int i = 0; i < kNumPositions; ++i) words.push_back(kPositionNames[i]);
    for (int i = 0; i < kNumSceneColors; ++i) words.push_back(kSceneColorNames[i]);
    return words;
}

const std::regex& date_regex() {
    static const std::regex re(R"(^\d{4}-\d{2}-\d{2}$)");
    return re;
}

const std::regex& id_token_regex() {
    // mixed letter+digit tokens such as wiki ids ("q12345", "img_0042")
    static const std::regex re(R"(^(?=.*[a-z])(?=.*\d)[a-z0-9_\-]{2,}$)", std::regex::icase);
    return re;
}

}  // namespace

const char* shape_name(Shape s) { return kShapeNames[(int)s]; }
const char* pattern_name(Pattern p) { return kPatternNames[(int)p]; }
const char* bucket_name(Bucket b) { return kBucketNames[(int)b]; }
const char* glyph_color_name(int idx) { return kGlyphColorNames[idx]; }
const char* scene_color_name(int idx) { return kSceneColorNames[idx]; }
const char* position_name(int idx) { return kPositionNames[idx]; }
std::array<float, 3> glyph_color_rgb(int idx) {
    return {kGlyphRgb[idx][0], kGlyphRgb[idx][1], kGlyphRgb[idx][2]};
}
std::array<float, 3> scene_color_rgb(int idx) {
    return {kSceneRgb[idx][0], kSceneRgb[idx][1], kSceneRgb[idx][2]};
}
std::array<float, 3> canonical_background_rgb() { return {0.0f, 0.0f, 0.0f}; }

int Vocab::add(const std::string& tok) {
    auto it = ids_.find(tok);
    if (it != ids_.end()) return it->second;
    int id = (int)tokens_.size();
    tokens_.push_back(tok);
    ids_[tok] = id;
    return id;
}

int Vocab::id_of(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? -1 : it->second;
}

int Vocab::require_id(const std::string& tok) const {
    int id = id_of(tok);
    require(id >= 0, kDataError, "token not in vocabulary: " + tok);
    return id;
}

void Corpus::rebuild_indices() {
    record_index.clear();
    entity_index.clear();
    for (size_t i = 0; i < records.size(); ++i) {
        auto [it, fresh] = record_index.emplace(records[i].record_id, (int)i);
        require(fresh, kDataError, "duplicate record_id: " + records[i].record_id);
    }
    for (size_t i = 0; i < entities.size(); ++i) {
        auto [it, fresh] = entity_index.emplace(entities[i].entity_id, (int)i);
        require(fresh, kDataError, "duplicate entity_id: " + entities[i].entity_id);
    }
}

void Corpus::validate() const {
    for (const auto& r : records) {
        require((int)r.caption.size() <= kMaxCaptionTokens, kDataError,
                "caption too long in record " + r.record_id);
        for (int tok : r.caption)
            require(tok >= 0 && tok < vocab.size(), kDataError, "caption token out of vocab in " + r.record_id);
        if (r.entity_id)
            require(entity_index.count(*r.entity_id) != 0, kDataError,
                    "record " + r.record_id + " references unknown entity " + *r.entity_id);
        require(r.image.rank() == 3 && r.image.dim(0) == 3, kDataError, "bad image shape in " + r.record_id);
        for (int64_t i = 0; i < r.image.numel(); ++i)
            require(r.image[i] >= -1.0f && r.image[i] <= 1.0f, kDataError, "image value outside [-1,1]");
    }
    // appearance map must be injective
    std::set<std::tuple<int, int, int>> seen;
    for (const auto& e : entities) {
        auto key = std::make_tuple((int)e.shape, e.color, (int)e.pattern);
        require(seen.insert(key).second, kDataError, "two entities share an appearance");
    }
}

const ImageTextRecord& Corpus::record(const std::string& id) const {
    auto it = record_index.find(id);
    require(it != record_index.end(), kDataError, "unknown record: " + id);
    return records[(size_t)it->second];
}

const EntitySpec& Corpus::entity(const std::string& id) const {
    auto it = entity_index.find(id);
    require(it != entity_index.end(), kDataError, "unknown entity: " + id);
    return entities[(size_t)it->second];
}

std::vector<int> Corpus::training_indices() const {
    std::vector<int> out;
    for (size_t i = 0; i < records.size(); ++i)
        if (!(records[i].bucket && *records[i].bucket == Bucket::unseen)) out.push_back((int)i);
    return out;
}

std::vector<int> Corpus::kb_indices_for_entity(const std::string& entity_id) const {
    std::vector<int> out;
    for (size_t i = 0; i < records.size(); ++i)
        if (records[i].entity_id && *records[i].entity_id == entity_id) {
            if (!records[i].scene)
                out.insert(out.begin(), (int)i);  // prototype first
            else
                out.push_back((int)i);
        }
    return out;
}

std::vector<std::string> Corpus::caption_tokens(const ImageTextRecord& r) const {
    std::vector<std::string> out;
    out.reserve(r.caption.size());
    for (int id : r.caption) out.push_back(vocab.token(id));
    return out;
}

std::string Corpus::caption_text(const ImageTextRecord& r) const {
    std::string out;
    for (size_t i = 0; i < r.caption.size(); ++i) {
        if (i) out += ' ';
        out += vocab.token(r.caption[i]);
    }
    return out;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace((unsigned char)ch)) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += (char)std::tolower((unsigned char)ch);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<std::string> caption_from_template(int template_idx, const std::string& name_token, int background,
                                               int position) {
    require(template_idx >= 0 && template_idx < kNumCaptionTemplates, kUsageError, "bad template index");
    std::string bg = background < 0 ? "gray" : kSceneColorNames[background];
    std::string text = kTemplates[template_idx];
    auto replace = [&](const std::string& ph, const std::string& val) {
        size_t pos = text.find(ph);
        if (pos != std::string::npos) text.replace(pos, ph.size(), val);
    };
    replace("{e}", name_token);
    replace("{bg}", bg);
    replace("{pos}", kPositionNames[position]);
    return tokenize(text);
}

EntitySplit split_entities(int n_entities) {
    EntitySplit s;
    s.frequent = (int)std::lround(0.5 * n_entities);
    s.unseen = std::max(1, (int)std::lround(0.2 * n_entities));
    s.infrequent = n_entities - s.frequent - s.unseen;
    require(s.frequent >= 1 && s.infrequent >= 1 && s.unseen >= 1, kUsageError,
            "need at least 3 entities for the frequent/infrequent/unseen split");
    return s;
}

double canonical_scale(const EntitySpec& e, int canvas) {
    // analytic guess, then a deterministic grid refinement so rasterized
    // colored-pixel counts come out near-equal across entities
    double target_px = 0.0977 * canvas * canvas;
    double uf = shape_area_fraction(e.shape) * pattern_coverage(e.pattern);
    double guess = std::sqrt(target_px / (uf * canvas * canvas));
    guess = std::clamp(guess, 0.3, 0.7);
    double best_s = guess;
    int best_err = INT_MAX;
    for (int i = -40; i <= 40; ++i) {
        double s = guess + 0.0025 * i;
        if (s < 0.3 || s > 0.7) continue;
        SceneSpec probe{0, 0, s};
        int n = count_glyph_pixels(e, probe, canvas);
        int err = std::abs(n - (int)std::lround(target_px));
        if (err < best_err) {
            best_err = err;
            best_s = s;
        }
    }
    return best_s;
}

Tensor<float> render_record_image(const EntitySpec& e, const SceneSpec& scene, int canvas) {
    return render_scene(e, scene, canvas, scene_color_rgb(scene.background));
}

Tensor<float> render_prototype(const EntitySpec& e, int canvas) {
    SceneSpec canonical{0, 0, canonical_scale(e, canvas)};
    return render_scene(e, canonical, canvas, canonical_background_rgb());
}

Corpus generate_synthetic_corpus(int n_entities, const BucketCounts& ipb, int canvas, uint64_t seed) {
    require(n_entities >= 3, kUsageError, "generate_synthetic_corpus: need n_entities >= 3");
    require(canvas == 32 || canvas == 64, kUsageError, "generate_synthetic_corpus: canvas must be 32 or 64");
    require(canvas % 8 == 0, kUsageError, "canvas size must be divisible by 8");
    require(n_entities <= kNumShapes * kNumGlyphColors * kNumPatterns, kUsageError, "too many entities");
    require(ipb.frequent >= 10 * ipb.infrequent, kUsageError,
            "bucket counts must follow the Zipf-like split: frequent >= 10x infrequent");
    require(ipb.infrequent >= 1 && ipb.unseen >= 1, kUsageError, "bucket counts must be >= 1");

    Corpus corpus;
    corpus.canvas = canvas;

    // injective appearance assignment: a seeded permutation of all combos
    RandomStream combo_rs = RandomStream::derive(seed, "corpus/appearance");
    std::vector<int> combos(kNumShapes * kNumGlyphColors * kNumPatterns);
    for (size_t i = 0; i < combos.size(); ++i) combos[i] = (int)i;
    for (size_t i = combos.size() - 1; i > 0; --i)
        std::swap(combos[i], combos[(size_t)combo_rs.uniform_int(0, (int64_t)i)]);

    RandomStream name_rs = RandomStream::derive(seed, "corpus/names");
    std::set<std::string> taken;
    for (const auto& w : base_vocab_words()) taken.insert(w);

    EntitySplit split = split_entities(n_entities);
    for (int i = 0; i < n_entities; ++i) {
        EntitySpec e;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "e%02d", i);
        e.entity_id = buf;
        int combo = combos[(size_t)i];
        e.shape = (Shape)(combo / (kNumGlyphColors * kNumPatterns));
        e.color = (combo / kNumPatterns) % kNumGlyphColors;
        e.pattern = (Pattern)(combo % kNumPatterns);
        e.name_token = make_name_token(name_rs, taken);
        taken.insert(e.name_token);
        e.bucket = i < split.frequent              ? Bucket::frequent
                   : i < split.frequent + split.infrequent ? Bucket::infrequent
                                                           : Bucket::unseen;
        corpus.entities.push_back(std::move(e));
    }

    for (const auto& w : base_vocab_words()) corpus.vocab.add(w);
    for (const auto& e : corpus.entities) corpus.vocab.add(e.name_token);

    RandomStream scene_rs = RandomStream::derive(seed, "corpus/scenes");
    int next_record = 0;
    auto add_record = [&](const EntitySpec& e, const std::optional<SceneSpec>& scene, int template_idx) {
        ImageTextRecord r;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "r%05d", next_record++);
        r.record_id = buf;
        r.entity_id = e.entity_id;
        r.bucket = e.bucket;
        r.scene = scene;
        std::vector<std::string> toks;
        if (scene) {
            toks = caption_from_template(template_idx, e.name_token, scene->background, scene->position);
            r.image = render_record_image(e, *scene, canvas);
        } else {
            toks = caption_from_template(0, e.name_token, -1, 0);
            r.image = render_prototype(e, canvas);
        }
        for (const auto& t : toks) r.caption.push_back(corpus.vocab.require_id(t));
        corpus.records.push_back(std::move(r));
    };

    for (const auto& e : corpus.entities) {
        add_record(e, std::nullopt, 0);  // canonical prototype
        int n_scene = e.bucket == Bucket::frequent     ? ipb.frequent
                      : e.bucket == Bucket::infrequent ? ipb.infrequent
                                                       : ipb.unseen - 1;
        for (int i = 0; i < n_scene; ++i) {
            SceneSpec sc;
            sc.background = (int)scene_rs.uniform_int(0, kNumSceneColors - 1);
            sc.position = (int)scene_rs.uniform_int(0, kNumPositions - 1);
            sc.scale = 0.30 + scene_rs.uniform() * 0.25;
            int tmpl = (int)scene_rs.uniform_int(0, kNumCaptionTemplates - 1);
            add_record(e, sc, tmpl);
        }
    }

    corpus.rebuild_indices();
    corpus.validate();
    return corpus;
}

Corpus ingest_corpus(const std::string& manifest_path, IngestStats* stats) {
    std::ifstream in(manifest_path);
    if (!in) raise_missing("manifest not found: " + manifest_path);
    fs::path base = fs::path(manifest_path).parent_path();

    IngestStats st;
    Corpus corpus;
    corpus.canvas = 0;

    // optional entity table next to the manifest
    fs::path ent_path = base / "entities.tsv";
    if (fs::exists(ent_path)) {
        Corpus tmp;
        std::ifstream ein(ent_path);
        std::string line;
        while (std::getline(ein, line)) {
            if (line.empty()) continue;
            std::stringstream ss(line);
            std::string id, name, shape, color, pattern, bucket;
            std::getline(ss, id, '\t');
            std::getline(ss, name, '\t');
            std::getline(ss, shape, '\t');
            std::getline(ss, color, '\t');
            std::getline(ss, pattern, '\t');
            std::getline(ss, bucket, '\t');
            EntitySpec e;
            e.entity_id = id;
            e.name_token = name;
            for (int i = 0; i < kNumShapes; ++i)
                if (shape == kShapeNames[i]) e.shape = (Shape)i;
            for (int i = 0; i < kNumGlyphColors; ++i)
                if (color == kGlyphColorNames[i]) e.color = i;
            for (int i = 0; i < kNumPatterns; ++i)
                if (pattern == kPatternNames[i]) e.pattern = (Pattern)i;
            for (int i = 0; i < 3; ++i)
                if (bucket == kBucketNames[i]) e.bucket = (Bucket)i;
            corpus.entities.push_back(std::move(e));
        }
    }

    std::string line;
    int lineno = 0;
    std::vector<std::vector<std::string>> kept_tokens;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, caption, img_rel, entity, bucket;
        std::getline(ss, id, '\t');
        std::getline(ss, caption, '\t');
        std::getline(ss, img_rel, '\t');
        std::getline(ss, entity, '\t');
        std::getline(ss, bucket, '\t');
        if (id.empty() || img_rel.empty()) {
            ++st.skipped_other;
            std::cerr << "warning: malformed manifest line " << lineno << ", skipped\n";
            continue;
        }
        std::vector<std::string> toks = tokenize(caption);
        if ((int)toks.size() > kMaxCaptionTokens) {
            ++st.dropped_length;
            continue;
        }
        bool noisy = false;
        for (const auto& t : toks)
            if (std::regex_match(t, date_regex()) || std::regex_match(t, id_token_regex())) {
                noisy = true;
                break;
            }
        if (noisy) {
            ++st.dropped_date_or_id;
            continue;
        }
        Tensor<float> img;
        try {
            img = read_png((base / img_rel).string());
        } catch (const Error&) {
            ++st.skipped_unreadable;
            std::cerr << "warning: unreadable image for record " << id << ", skipped\n";
            continue;
        }
        if (corpus.canvas == 0) corpus.canvas = img.dim(1);
        if (img.dim(1) != corpus.canvas || img.dim(2) != corpus.canvas) {
            ++st.skipped_other;
            std::cerr << "warning: record " << id << " has mismatched image size, skipped\n";
            continue;
        }
        for (int64_t i = 0; i < img.numel(); ++i) img[i] = std::clamp(img[i], -1.0f, 1.0f);

        ImageTextRecord r;
        r.record_id = id;
        r.image = std::move(img);
        if (!entity.empty() && entity != "-") r.entity_id = entity;
        if (!bucket.empty() && bucket != "-")
            for (int i = 0; i < 3; ++i)
                if (bucket == kBucketNames[i]) r.bucket = (Bucket)i;
        corpus.records.push_back(std::move(r));
        kept_tokens.push_back(std::move(toks));
        ++st.kept;
    }
    require(!corpus.records.empty(), kDataError, "ingest: no records survived filtering");

    for (size_t i = 0; i < corpus.records.size(); ++i) {
        for (const auto& t : kept_tokens[i]) corpus.records[i].caption.push_back(corpus.vocab.add(t));
    }
    corpus.rebuild_indices();
    corpus.validate();
    if (stats) *stats = st;
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream manifest(fs::path(dir) / "manifest.tsv");
    require((bool)manifest, kDataError, "cannot write manifest in " + dir);
    for (const auto& r : corpus.records) {
        std::string rel = "images/" + r.record_id + ".png";
        write_png((fs::path(dir) / rel).string(), r.image);
        manifest << r.record_id << '\t' << corpus.caption_text(r) << '\t' << rel << '\t'
                 << (r.entity_id ? *r.entity_id : "-") << '\t' << (r.bucket ? bucket_name(*r.bucket) : "-")
                 << '\n';
    }
    std::ofstream vocab(fs::path(dir) / "vocab.txt");
    for (const auto& t : corpus.vocab.tokens()) vocab << t << '\n';
    if (!corpus.entities.empty()) {
        std::ofstream ents(fs::path(dir) / "entities.tsv");
        for (const auto& e : corpus.entities)
            ents << e.entity_id << '\t' << e.name_token << '\t' << shape_name(e.shape) << '\t'
                 << glyph_color_name(e.color) << '\t' << pattern_name(e.pattern) << '\t'
                 << bucket_name(e.bucket) << '\n';
    }
}

Corpus load_corpus(const std::string& dir) {
    Corpus corpus = ingest_corpus((fs::path(dir) / "manifest.tsv").string());
    // our own corpora carry a persisted vocabulary with stable ids
    std::ifstream vin(fs::path(dir) / "vocab.txt");
    if (vin) {
        Vocab vocab;
        std::string tok;
        while (std::getline(vin, tok))
            if (!tok.empty()) vocab.add(tok);
        for (auto& r : corpus.records) {
            std::vector<int> remapped;
            for (int id : r.caption) remapped.push_back(vocab.require_id(corpus.vocab.token(id)));
            r.caption = std::move(remapped);
        }
        corpus.vocab = std::move(vocab);
        corpus.validate();
    }
    return corpus;
}

}  // namespace ragdiff
