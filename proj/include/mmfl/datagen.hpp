#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmfl/nnkit.hpp"

namespace mmfl::datagen {

using nnkit::Vec;

struct Sample {
    Vec audio;
    Vec visual;
    std::size_t label = 0;
};

struct DatasetSpec {
    std::size_t num_classes = 10;
    std::size_t audio_dim = 16;
    std::size_t visual_dim = 16;
    std::size_t samples_per_class = 200;
    std::vector<std::pair<std::size_t, std::size_t>> audio_ambiguous_pairs;
    double audio_noise_sigma = 1.0;
    double visual_noise_sigma = 1.0;
    std::uint64_t seed = 0;
};

struct MultimodalDataset {
    DatasetSpec spec;
    std::vector<Sample> train;
    std::vector<Sample> test;
    std::vector<Vec> audio_centers;
    std::vector<Vec> visual_centers;

    std::vector<std::size_t> train_labels() const;
    // Stable 64-bit content hash; used to check two runs saw the same data.
    std::uint64_t content_hash() const;
};

struct Partition {
    std::vector<std::vector<std::size_t>> shards;  // one index list per client
};

enum class Modality { AudioOnly, Multimodal };

MultimodalDataset generate_dataset(const DatasetSpec& spec);

Partition dirichlet_partition(const std::vector<std::size_t>& labels, std::size_t n_clients,
                              double alpha, std::uint64_t seed);

std::vector<Modality> assign_modalities(std::size_t n_clients, double missing_rate,
                                        std::uint64_t seed);

// Binary dataset file with a header echoing the spec; see README for layout.
void save_dataset(const MultimodalDataset& ds, const std::string& path);
MultimodalDataset load_dataset(const std::string& path);
void export_csv(const MultimodalDataset& ds, const std::string& path);

}  // namespace mmfl::datagen
