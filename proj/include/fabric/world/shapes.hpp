#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fabric/rng.hpp"
#include "fabric/tensor.hpp"

namespace fabric::world {

inline constexpr int kImageSize = 16;
inline constexpr int kChannels = 3;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 4;
inline constexpr int kNumSizes = 2;
inline constexpr int kNumClasses = kNumShapes * kNumColors * kNumSizes;

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class Size { small, large };
enum class Variant { train, target };

/// Palette entry in [0, 1] RGB.
std::array<float, 3> palette(Color c);

std::string_view name(ShapeKind s);
std::string_view name(Color c);
std::string_view name(Size s);
std::string_view name(Variant v);
/// Throw std::invalid_argument on unknown names.
ShapeKind parse_shape(std::string_view s);
Color parse_color(std::string_view s);
Size parse_size(std::string_view s);
Variant parse_variant(std::string_view s);

struct ShapeSpec {
    ShapeKind shape = ShapeKind::circle;
    Color color = Color::red;
    Size size = Size::large;
    float offset_x = 0.0f;
    float offset_y = 0.0f;
    float rotation_deg = 0.0f;
    float brightness = 1.0f;

    bool operator==(const ShapeSpec&) const = default;
};

/// Offsets clamped so the shape's bounding box stays at least one pixel from
/// every canvas edge; other fields clamped to their documented ranges.
ShapeSpec fit_to_canvas(ShapeSpec spec);

/// Random nuisance parameters for the given attributes.
ShapeSpec random_spec(ShapeKind shape, Color color, Size size, Rng& rng);

/// [3, 16, 16] image in [-1, 1] on a mid-gray background. The train variant
/// samples coverage at pixel centres; the target variant is anti-aliased and
/// textured using `seed`. Pure in (spec, variant, seed).
Tensor render(const ShapeSpec& spec, Variant variant, std::uint64_t seed);

/// A prompt token is either an attribute or null.
struct Prompt {
    std::optional<ShapeKind> shape;
    std::optional<Color> color;
    std::optional<Size> size;

    static Prompt of(const ShapeSpec& s) { return {s.shape, s.color, s.size}; }
    static Prompt null() { return {}; }
    bool operator==(const Prompt&) const = default;
    bool complete() const { return shape && color && size; }
};

/// Token ids: shapes 0-2, colors 3-6, sizes 7-8, null 9.
inline constexpr int kNullToken = 9;
inline constexpr int kVocabSize = 10;
std::array<int, 3> tokens(const Prompt& p);
/// "circle,red,large"; any field may be "null" or empty.
Prompt parse_prompt(std::string_view text);
std::string to_string(const Prompt& p);

int class_index(ShapeKind s, Color c, Size z);
int class_index(const Prompt& p);  // requires a complete prompt
Prompt class_prompt(int index);

struct Sample {
    Tensor image;
    Prompt prompt;
    ShapeSpec spec;
    std::uint64_t seed = 0;
};

/// n samples with uniformly drawn classes and random nuisance parameters.
std::vector<Sample> sample_dataset(int n, Variant variant, Rng& rng);

nlohmann::json to_json(const ShapeSpec& s);
ShapeSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Prompt& p);
Prompt prompt_from_json(const nlohmann::json& j);
/// JSON array of {spec, seed, variant} entries.
nlohmann::json manifest(const std::vector<Sample>& samples, Variant variant);

}  // namespace fabric::world
