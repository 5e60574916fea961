#include "mmfl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

namespace mmfl::datagen {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

constexpr std::uint64_t kCenterTag = 0x11;
constexpr std::uint64_t kDataTag = 0x22;
constexpr std::uint64_t kPartitionTag = 0x33;
constexpr std::uint64_t kModalityTag = 0x44;
constexpr double kSphereRadius = 5.0;
constexpr double kMinAudioSeparation = 1.0;

Vec random_sphere_point(Rng& rng, std::size_t dim, double radius) {
    Vec v(dim);
    double norm2 = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        norm2 += x * x;
    }
    const double scale = radius / std::sqrt(std::max(norm2, 1e-300));
    for (auto& x : v) x *= scale;
    return v;
}

double dist(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

bool is_ambiguous_pair(const DatasetSpec& spec, std::size_t a, std::size_t b) {
    for (const auto& [p, q] : spec.audio_ambiguous_pairs) {
        if ((p == a && q == b) || (p == b && q == a)) return true;
    }
    return false;
}

struct Centers {
    std::vector<Vec> audio;
    std::vector<Vec> visual;
};

// Draw class centers on a hypersphere, collapse ambiguous audio pairs to the
// pair mean, and require (a) usable separation between the remaining audio
// centers and (b) ambiguous pairs at least as far apart visually as the
// closest non-ambiguous pair. Resamples with a bumped seed until both hold.
Centers draw_centers(const DatasetSpec& spec) {
    for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
        Rng rng(mix64(spec.seed, kCenterTag, attempt));
        Centers c;
        for (std::size_t k = 0; k < spec.num_classes; ++k) {
            c.audio.push_back(random_sphere_point(rng, spec.audio_dim, kSphereRadius));
        }
        for (std::size_t k = 0; k < spec.num_classes; ++k) {
            c.visual.push_back(random_sphere_point(rng, spec.visual_dim, kSphereRadius));
        }
        for (const auto& [a, b] : spec.audio_ambiguous_pairs) {
            for (std::size_t i = 0; i < spec.audio_dim; ++i) {
                const double mean = 0.5 * (c.audio[a][i] + c.audio[b][i]);
                c.audio[a][i] = mean;
                c.audio[b][i] = mean;
            }
        }
        bool ok = true;
        double min_nonambiguous_visual = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < spec.num_classes && ok; ++a) {
            for (std::size_t b = a + 1; b < spec.num_classes && ok; ++b) {
                if (is_ambiguous_pair(spec, a, b)) continue;
                if (dist(c.audio[a], c.audio[b]) < kMinAudioSeparation) ok = false;
                min_nonambiguous_visual = std::min(min_nonambiguous_visual, dist(c.visual[a], c.visual[b]));
            }
        }
        for (const auto& [a, b] : spec.audio_ambiguous_pairs) {
            if (dist(c.visual[a], c.visual[b]) < min_nonambiguous_visual) ok = false;
        }
        if (ok) return c;
    }
    throw std::runtime_error("could not place class centers; check dims vs. class count");
}

Sample draw_sample(const DatasetSpec& spec, const Centers& c, std::size_t label, Rng& rng) {
    Sample s;
    s.label = label;
    s.audio.resize(spec.audio_dim);
    for (std::size_t i = 0; i < spec.audio_dim; ++i) {
        s.audio[i] = c.audio[label][i] + spec.audio_noise_sigma * rng.normal();
    }
    s.visual.resize(spec.visual_dim);
    for (std::size_t i = 0; i < spec.visual_dim; ++i) {
        s.visual[i] = c.visual[label][i] + spec.visual_noise_sigma * rng.normal();
    }
    return s;
}

void hash_doubles(std::uint64_t& h, const Vec& v) {
    for (double x : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof(bits));
        h = mix64(h, bits);
    }
}

}  // namespace

std::vector<std::size_t> MultimodalDataset::train_labels() const {
    std::vector<std::size_t> labels;
    labels.reserve(train.size());
    for (const auto& s : train) labels.push_back(s.label);
    return labels;
}

std::uint64_t MultimodalDataset::content_hash() const {
    std::uint64_t h = mix64(spec.seed, spec.num_classes, spec.audio_dim, spec.visual_dim);
    for (const auto& split : {&train, &test}) {
        h = mix64(h, split->size());
        for (const auto& s : *split) {
            h = mix64(h, s.label);
            hash_doubles(h, s.audio);
            hash_doubles(h, s.visual);
        }
    }
    return h;
}

MultimodalDataset generate_dataset(const DatasetSpec& spec) {
    require(spec.num_classes >= 2, "num_classes must be >= 2");
    require(spec.audio_dim >= 2 && spec.visual_dim >= 2, "dims must be >= 2");
    require(spec.samples_per_class >= 1, "samples_per_class must be >= 1");
    std::set<std::size_t> seen;
    for (const auto& [a, b] : spec.audio_ambiguous_pairs) {
        require(a < spec.num_classes && b < spec.num_classes,
                "ambiguous pair index out of range");
        require(a != b, "ambiguous pair must name two distinct classes");
        require(seen.insert(a).second && seen.insert(b).second,
                "ambiguous pairs must be disjoint");
    }

    MultimodalDataset ds;
    ds.spec = spec;
    const Centers centers = draw_centers(spec);
    ds.audio_centers = centers.audio;
    ds.visual_centers = centers.visual;

    Rng rng(mix64(spec.seed, kDataTag));
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
            ds.train.push_back(draw_sample(spec, centers, c, rng));
        }
    }
    const std::size_t test_per_class =
        std::max<std::size_t>(1, static_cast<std::size_t>(
                                     std::llround(0.2 * static_cast<double>(spec.samples_per_class))));
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < test_per_class; ++i) {
            ds.test.push_back(draw_sample(spec, centers, c, rng));
        }
    }
    return ds;
}

Partition dirichlet_partition(const std::vector<std::size_t>& labels, std::size_t n_clients,
                              double alpha, std::uint64_t seed) {
    require(!labels.empty(), "empty label list");
    require(n_clients >= 1, "n_clients must be >= 1");
    require(alpha > 0.0, "alpha must be positive");

    const std::size_t num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    Rng rng(mix64(seed, kPartitionTag));
    Partition part;
    part.shards.assign(n_clients, {});
    for (std::size_t c = 0; c < num_classes; ++c) {
        const auto& idx = by_class[c];
        if (idx.empty()) continue;
        const Vec props = rng.dirichlet(alpha, n_clients);
        // Largest-remainder rounding of proportions into integer counts.
        std::vector<std::size_t> counts(n_clients);
        std::vector<std::pair<double, std::size_t>> remainders;
        std::size_t assigned = 0;
        for (std::size_t j = 0; j < n_clients; ++j) {
            const double exact = props[j] * static_cast<double>(idx.size());
            counts[j] = static_cast<std::size_t>(std::floor(exact));
            assigned += counts[j];
            remainders.emplace_back(exact - std::floor(exact), j);
        }
        std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::size_t k = 0; assigned < idx.size(); ++k, ++assigned) {
            counts[remainders[k % n_clients].second]++;
        }
        std::size_t pos = 0;
        for (std::size_t j = 0; j < n_clients; ++j) {
            for (std::size_t k = 0; k < counts[j]; ++k) part.shards[j].push_back(idx[pos++]);
        }
    }

    // Empty-shard repair: move one sample from the largest shard into each
    // empty one. Dirichlet at small alpha routinely empties clients.
    for (std::size_t j = 0; j < n_clients; ++j) {
        if (!part.shards[j].empty()) continue;
        std::size_t donor = 0;
        for (std::size_t k = 1; k < n_clients; ++k) {
            if (part.shards[k].size() > part.shards[donor].size()) donor = k;
        }
        require(part.shards[donor].size() > 1, "not enough samples to fill every client");
        part.shards[j].push_back(part.shards[donor].back());
        part.shards[donor].pop_back();
    }
    return part;
}

std::vector<Modality> assign_modalities(std::size_t n_clients, double missing_rate,
                                        std::uint64_t seed) {
    require(missing_rate >= 0.0 && missing_rate <= 1.0, "missing_rate must be in [0, 1]");
    // round(r*N), half rounds toward more audio-only clients
    const auto n_audio = static_cast<std::size_t>(
        std::floor(missing_rate * static_cast<double>(n_clients) + 0.5));
    std::vector<std::size_t> ids(n_clients);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(mix64(seed, kModalityTag));
    rng.shuffle(ids);
    std::vector<Modality> out(n_clients, Modality::Multimodal);
    for (std::size_t k = 0; k < n_audio; ++k) out[ids[k]] = Modality::AudioOnly;
    return out;
}

namespace {

constexpr std::uint64_t kFileMagic = 0x4d4d444153455431ULL;  // "MMDASET1"

template <typename T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void put_vec(std::ofstream& os, const Vec& v) {
    put<std::uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Vec get_vec(std::ifstream& is) {
    Vec v(get<std::uint64_t>(is));
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    return v;
}

void put_samples(std::ofstream& os, const std::vector<Sample>& samples) {
    put<std::uint64_t>(os, samples.size());
    for (const auto& s : samples) {
        put<std::uint64_t>(os, s.label);
        put_vec(os, s.audio);
        put_vec(os, s.visual);
    }
}

std::vector<Sample> get_samples(std::ifstream& is) {
    std::vector<Sample> samples(get<std::uint64_t>(is));
    for (auto& s : samples) {
        s.label = get<std::uint64_t>(is);
        s.audio = get_vec(is);
        s.visual = get_vec(is);
    }
    return samples;
}

}  // namespace

void save_dataset(const MultimodalDataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    put(os, kFileMagic);
    put<std::uint64_t>(os, ds.spec.num_classes);
    put<std::uint64_t>(os, ds.spec.audio_dim);
    put<std::uint64_t>(os, ds.spec.visual_dim);
    put<std::uint64_t>(os, ds.spec.samples_per_class);
    put<std::uint64_t>(os, ds.spec.seed);
    put(os, ds.spec.audio_noise_sigma);
    put(os, ds.spec.visual_noise_sigma);
    put<std::uint64_t>(os, ds.spec.audio_ambiguous_pairs.size());
    for (const auto& [a, b] : ds.spec.audio_ambiguous_pairs) {
        put<std::uint64_t>(os, a);
        put<std::uint64_t>(os, b);
    }
    put<std::uint64_t>(os, ds.audio_centers.size());
    for (const auto& c : ds.audio_centers) put_vec(os, c);
    for (const auto& c : ds.visual_centers) put_vec(os, c);
    put_samples(os, ds.train);
    put_samples(os, ds.test);
    if (!os) throw std::runtime_error("write failed: " + path);
}

MultimodalDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    if (get<std::uint64_t>(is) != kFileMagic) {
        throw std::runtime_error("not a dataset file: " + path);
    }
    MultimodalDataset ds;
    ds.spec.num_classes = get<std::uint64_t>(is);
    ds.spec.audio_dim = get<std::uint64_t>(is);
    ds.spec.visual_dim = get<std::uint64_t>(is);
    ds.spec.samples_per_class = get<std::uint64_t>(is);
    ds.spec.seed = get<std::uint64_t>(is);
    ds.spec.audio_noise_sigma = get<double>(is);
    ds.spec.visual_noise_sigma = get<double>(is);
    const auto n_pairs = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n_pairs; ++i) {
        const auto a = get<std::uint64_t>(is);
        const auto b = get<std::uint64_t>(is);
        ds.spec.audio_ambiguous_pairs.emplace_back(a, b);
    }
    const auto n_centers = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n_centers; ++i) ds.audio_centers.push_back(get_vec(is));
    for (std::uint64_t i = 0; i < n_centers; ++i) ds.visual_centers.push_back(get_vec(is));
    ds.train = get_samples(is);
    ds.test = get_samples(is);
    if (!is) throw std::runtime_error("truncated dataset file: " + path);
    return ds;
}

void export_csv(const MultimodalDataset& ds, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "split,label";
    for (std::size_t i = 0; i < ds.spec.audio_dim; ++i) os << ",a" << i;
    for (std::size_t i = 0; i < ds.spec.visual_dim; ++i) os << ",v" << i;
    os << "\n";
    char buf[32];
    auto emit = [&](const char* split, const std::vector<Sample>& samples) {
        for (const auto& s : samples) {
            os << split << ',' << s.label;
            for (double x : s.audio) {
                std::snprintf(buf, sizeof(buf), "%.17g", x);
                os << ',' << buf;
            }
            for (double x : s.visual) {
                std::snprintf(buf, sizeof(buf), "%.17g", x);
                os << ',' << buf;
            }
            os << "\n";
        }
    };
    emit("train", ds.train);
    emit("test", ds.test);
}

}  // namespace mmfl::datagen
