#include "fabric/world/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fabric::world {

namespace {

constexpr float kCenter = kImageSize / 2.0f;
constexpr float kMargin = 1.0f;
constexpr float kBackground = 0.5f;
constexpr float kMaxOffset = 3.0f;
constexpr float kTextureAmplitude = 0.08f;
constexpr int kSuperSample = 4;

constexpr std::array<std::string_view, kNumShapes> kShapeNames{"circle", "square", "triangle"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red", "green", "blue", "yellow"};
constexpr std::array<std::string_view, kNumSizes> kSizeNames{"small", "large"};

float circle_radius(Size s) { return s == Size::large ? 5.5f : 3.25f; }
float square_half_side(Size s) { return s == Size::large ? 4.6f : 2.7f; }
float triangle_circumradius(Size s) { return s == Size::large ? 6.2f : 3.7f; }

template <std::size_t N>
int lookup(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == s) return static_cast<int>(i);
    }
    throw std::invalid_argument(std::string("unknown ") + what + " token '" + std::string(s) + "'");
}

struct Vertex {
    float x, y;
};

// Polygon vertices relative to the shape centre, counter-clockwise on screen.
std::vector<Vertex> polygon(const ShapeSpec& s) {
    const float rot = s.rotation_deg * std::numbers::pi_v<float> / 180.0f;
    std::vector<Vertex> v;
    if (s.shape == ShapeKind::square) {
        const float h = square_half_side(s.size);
        for (auto [x, y] : {std::pair{-h, -h}, std::pair{h, -h}, std::pair{h, h}, std::pair{-h, h}}) v.push_back({x, y});
    } else {
        const float r = triangle_circumradius(s.size);
        for (float a : {-90.0f, 30.0f, 150.0f}) {
            const float rad = a * std::numbers::pi_v<float> / 180.0f;
            v.push_back({r * std::cos(rad), r * std::sin(rad)});
        }
    }
    const float c = std::cos(rot), sn = std::sin(rot);
    for (auto& p : v) p = {c * p.x - sn * p.y, sn * p.x + c * p.y};
    return v;
}

struct Extent {
    float min_x, max_x, min_y, max_y;
};

Extent extent(const ShapeSpec& s) {
    if (s.shape == ShapeKind::circle) {
        const float r = circle_radius(s.size);
        return {-r, r, -r, r};
    }
    Extent e{1e9f, -1e9f, 1e9f, -1e9f};
    for (auto p : polygon(s)) {
        e.min_x = std::min(e.min_x, p.x);
        e.max_x = std::max(e.max_x, p.x);
        e.min_y = std::min(e.min_y, p.y);
        e.max_y = std::max(e.max_y, p.y);
    }
    return e;
}

class Inside {
public:
    explicit Inside(const ShapeSpec& s)
        : spec_(s), cx_(kCenter + s.offset_x), cy_(kCenter + s.offset_y) {
        if (s.shape != ShapeKind::circle) verts_ = polygon(s);
        else r2_ = circle_radius(s.size) * circle_radius(s.size);
    }

    bool operator()(float px, float py) const {
        const float dx = px - cx_, dy = py - cy_;
        if (spec_.shape == ShapeKind::circle) return dx * dx + dy * dy <= r2_;
        const std::size_t n = verts_.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Vertex a = verts_[i], b = verts_[(i + 1) % n];
            const float cross = (b.x - a.x) * (dy - a.y) - (b.y - a.y) * (dx - a.x);
            if (cross < 0.0f) return false;
        }
        return true;
    }

private:
    ShapeSpec spec_;
    float cx_, cy_;
    float r2_ = 0.0f;
    std::vector<Vertex> verts_;
};

}  // namespace

std::array<float, 3> palette(Color c) {
    switch (c) {
        case Color::red: return {0.9f, 0.1f, 0.1f};
        case Color::green: return {0.1f, 0.75f, 0.15f};
        case Color::blue: return {0.15f, 0.25f, 0.9f};
        case Color::yellow: return {0.95f, 0.85f, 0.1f};
    }
    throw std::invalid_argument("bad color");
}

std::string_view name(ShapeKind s) { return kShapeNames.at(static_cast<std::size_t>(s)); }
std::string_view name(Color c) { return kColorNames.at(static_cast<std::size_t>(c)); }
std::string_view name(Size s) { return kSizeNames.at(static_cast<std::size_t>(s)); }
std::string_view name(Variant v) { return v == Variant::train ? "train" : "target"; }

ShapeKind parse_shape(std::string_view s) { return static_cast<ShapeKind>(lookup(kShapeNames, s, "shape")); }
Color parse_color(std::string_view s) { return static_cast<Color>(lookup(kColorNames, s, "color")); }
Size parse_size(std::string_view s) { return static_cast<Size>(lookup(kSizeNames, s, "size")); }
Variant parse_variant(std::string_view s) {
    if (s == "train") return Variant::train;
    if (s == "target") return Variant::target;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

ShapeSpec fit_to_canvas(ShapeSpec spec) {
    spec.brightness = std::clamp(spec.brightness, 0.9f, 1.1f);
    spec.rotation_deg = spec.shape == ShapeKind::circle ? 0.0f : std::clamp(spec.rotation_deg, 0.0f, 90.0f);
    const Extent e = extent(spec);
    const float lo = kMargin - kCenter;
    const float hi = kImageSize - kMargin - kCenter;
    spec.offset_x = std::clamp(std::clamp(spec.offset_x, -kMaxOffset, kMaxOffset), lo - e.min_x, hi - e.max_x);
    spec.offset_y = std::clamp(std::clamp(spec.offset_y, -kMaxOffset, kMaxOffset), lo - e.min_y, hi - e.max_y);
    return spec;
}

ShapeSpec random_spec(ShapeKind shape, Color color, Size size, Rng& rng) {
    ShapeSpec s{shape, color, size};
    s.offset_x = rng.uniform(-kMaxOffset, kMaxOffset);
    s.offset_y = rng.uniform(-kMaxOffset, kMaxOffset);
    s.rotation_deg = rng.uniform(0.0f, 90.0f);
    s.brightness = rng.uniform(0.9f, 1.1f);
    return fit_to_canvas(s);
}

Tensor render(const ShapeSpec& raw, Variant variant, std::uint64_t seed) {
    const ShapeSpec spec = fit_to_canvas(raw);
    const Inside inside(spec);
    std::array<float, 3> col = palette(spec.color);
    for (auto& c : col) c = std::clamp(c * spec.brightness, 0.0f, 1.0f);

    constexpr int hw = kImageSize * kImageSize;
    Tensor img({kChannels, kImageSize, kImageSize});
    Rng rng(seed);
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            float cov;
            float tex = 1.0f;
            if (variant == Variant::train) {
                cov = inside(x + 0.5f, y + 0.5f) ? 1.0f : 0.0f;
            } else {
                int hits = 0;
                for (int sy = 0; sy < kSuperSample; ++sy) {
                    for (int sx = 0; sx < kSuperSample; ++sx) {
                        hits += inside(x + (sx + 0.5f) / kSuperSample, y + (sy + 0.5f) / kSuperSample);
                    }
                }
                cov = static_cast<float>(hits) / (kSuperSample * kSuperSample);
                tex = 1.0f + kTextureAmplitude * rng.normal();
            }
            for (int c = 0; c < kChannels; ++c) {
                const float fg = std::clamp(col[static_cast<std::size_t>(c)] * tex, 0.0f, 1.0f);
                const float v = kBackground * (1.0f - cov) + fg * cov;
                img[static_cast<std::size_t>(c * hw + y * kImageSize + x)] = 2.0f * v - 1.0f;
            }
        }
    }
    return img;
}

std::array<int, 3> tokens(const Prompt& p) {
    return {p.shape ? static_cast<int>(*p.shape) : kNullToken,
            p.color ? kNumShapes + static_cast<int>(*p.color) : kNullToken,
            p.size ? kNumShapes + kNumColors + static_cast<int>(*p.size) : kNullToken};
}

Prompt parse_prompt(std::string_view text) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = text.find(',', start);
        parts.push_back(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (parts.size() != 3) throw std::invalid_argument("prompt must be 'shape,color,size', got '" + std::string(text) + "'");
    auto null = [](std::string_view s) { return s.empty() || s == "null"; };
    Prompt p;
    if (!null(parts[0])) p.shape = parse_shape(parts[0]);
    if (!null(parts[1])) p.color = parse_color(parts[1]);
    if (!null(parts[2])) p.size = parse_size(parts[2]);
    return p;
}

std::string to_string(const Prompt& p) {
    std::string out;
    out += p.shape ? name(*p.shape) : "null";
    out += ',';
    out += p.color ? name(*p.color) : "null";
    out += ',';
    out += p.size ? name(*p.size) : "null";
    return out;
}

int class_index(ShapeKind s, Color c, Size z) {
    return (static_cast<int>(s) * kNumColors + static_cast<int>(c)) * kNumSizes + static_cast<int>(z);
}

int class_index(const Prompt& p) {
    if (!p.complete()) throw std::invalid_argument("class_index needs a complete prompt");
    return class_index(*p.shape, *p.color, *p.size);
}

Prompt class_prompt(int index) {
    if (index < 0 || index >= kNumClasses) throw std::out_of_range("class index out of range");
    return {static_cast<ShapeKind>(index / (kNumColors * kNumSizes)),
            static_cast<Color>((index / kNumSizes) % kNumColors), static_cast<Size>(index % kNumSizes)};
}

std::vector<Sample> sample_dataset(int n, Variant variant, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_dataset needs n >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Prompt p = class_prompt(rng.below(kNumClasses));
        Sample s;
        s.spec = random_spec(*p.shape, *p.color, *p.size, rng);
        s.seed = rng.engine()();
        s.prompt = p;
        s.image = render(s.spec, variant, s.seed);
        out.push_back(std::move(s));
    }
    return out;
}

nlohmann::json to_json(const ShapeSpec& s) {
    return {{"shape", name(s.shape)},       {"color", name(s.color)},   {"size", name(s.size)},
            {"offset_x", s.offset_x},       {"offset_y", s.offset_y},   {"rotation_deg", s.rotation_deg},
            {"brightness", s.brightness}};
}

ShapeSpec spec_from_json(const nlohmann::json& j) {
    ShapeSpec s;
    s.shape = parse_shape(j.at("shape").get<std::string>());
    s.color = parse_color(j.at("color").get<std::string>());
    s.size = parse_size(j.at("size").get<std::string>());
    s.offset_x = j.value("offset_x", 0.0f);
    s.offset_y = j.value("offset_y", 0.0f);
    s.rotation_deg = j.value("rotation_deg", 0.0f);
    s.brightness = j.value("brightness", 1.0f);
    return s;
}

nlohmann::json to_json(const Prompt& p) {
    auto field = [](auto v) { return v ? nlohmann::json(std::string(name(*v))) : nlohmann::json(nullptr); };
    return {{"shape", field(p.shape)}, {"color", field(p.color)}, {"size", field(p.size)}};
}

Prompt prompt_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("prompt must be an object");
    for (const auto& [key, _] : j.items()) {
        if (key != "shape" && key != "color" && key != "size") throw std::invalid_argument("unknown prompt field '" + key + "'");
    }
    auto text = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        if (!j.at(key).is_string()) throw std::invalid_argument(std::string("prompt field '") + key + "' must be a string");
        return j.at(key).get<std::string>();
    };
    Prompt p;
    if (auto s = text("shape")) p.shape = parse_shape(*s);
    if (auto s = text("color")) p.color = parse_color(*s);
    if (auto s = text("size")) p.size = parse_size(*s);
    return p;
}

nlohmann::json manifest(const std::vector<Sample>& samples, Variant variant) {
    auto arr = nlohmann::json::array();
    for (const auto& s : samples) arr.push_back({{"spec", to_json(s.spec)}, {"seed", s.seed}, {"variant", name(variant)}});
    return arr;
}

}  // namespace fabric::world
