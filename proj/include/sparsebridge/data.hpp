#pragma once
// Slices, volumes, the synthetic paired phantom corpus and the on-disk volume
// format (manifest.json plus one little-endian f32 file per slice).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sparsebridge/tensor.hpp"

namespace sparsebridge {

enum class Modality { source, target };

std::string to_string(Modality m);
Modality parse_modality(const std::string &s);

struct Slice {
    Tensor pixels; // {H, W}, values in [0, 1]
    std::string subject_id;
    Modality modality = Modality::source;
    long position = 0;
    double spacing = 1.0;
};

struct Volume {
    std::string subject_id;
    Modality modality = Modality::source;
    long dense_extent = 0;
    double spacing = 1.0;
    int height = 0;
    int width = 0;
    std::vector<Slice> slices; // strictly increasing positions

    std::vector<long> positions() const;
    // nullptr when the position is absent.
    const Slice *find(long position) const;
    // Throws InvalidArgument on any violated invariant.
    void validate() const;
    // Slices stacked as {N, 1, H, W} in position order.
    Tensor stacked() const;
};

struct PairedVolume {
    Volume source;
    Volume target;
    int family = 0;
};

struct PhantomParams {
    int n_subjects = 24;
    int slices_per_subject = 40;
    int image_size = 32;
    int n_families = 6;
    // Relative spread of the per-subject source intensity scale; sets Var(||y - x0||).
    double intensity_jitter = 0.05;
    // Amplitude of the per-subject texture signature.
    double subject_texture = 0.04;
    // Per-slice source acquisition variation: relative gain spread and the
    // amplitude of a linear multiplicative bias field with random orientation.
    double slice_gain_jitter = 0.15;
    double slice_bias_field = 0.3;

    void validate() const;
};

// Deterministic in (params, seed). Subject IDs are "s000", "s001", ...;
// subject k belongs to family k % n_families.
std::vector<PairedVolume> generate_corpus(const PhantomParams &params, std::uint64_t seed);

// Keeps every factor-th slice of the current stride (positions congruent to 0
// modulo stride * factor, stride = gcd of positions); dense_extent is unchanged.
Volume sparsify(const Volume &volume, int factor);

void save_volume(const Volume &volume, const std::filesystem::path &dir);
Volume load_volume(const std::filesystem::path &dir);

// Index of paired slices by (subject, position), e.g. to resolve retrieved
// knowledge-base rows to their source and target pixels.
class SliceLibrary {
  public:
    SliceLibrary() = default;
    explicit SliceLibrary(const std::vector<PairedVolume> &corpus);

    // Throws InvalidArgument when the pair is unknown.
    const Tensor &source(const std::string &subject_id, long position) const;
    const Tensor &target(const std::string &subject_id, long position) const;
    bool contains(const std::string &subject_id, long position) const;

  private:
    std::map<std::pair<std::string, long>, std::pair<Tensor, Tensor>> slices_;
};

// Rounds every pixel to the nearest f32 value so the volume survives the
// on-disk format bit-exactly.
void quantize_to_f32(Tensor &t);

} // namespace sparsebridge
