#pragma once

#include "mmfl/flcore.hpp"

namespace mmfl::baselines {

using flcore::ExecOptions;
using flcore::RunConfig;
using flcore::RunResult;
using datagen::Modality;
using datagen::MultimodalDataset;
using datagen::Partition;

// Two disjoint FedAvg runs: the audio-only cohort trains the audio model,
// the multimodal cohort trains the fusion model. The reported audio model
// never sees a multimodal contribution.
RunResult run_unifl(const RunConfig& cfg, const MultimodalDataset& data,
                    const Partition& partition, const std::vector<Modality>& modalities,
                    const ExecOptions& exec = {});

// Exactly stage 1 of ModalityMirror.
RunResult run_multifl(const RunConfig& cfg, const MultimodalDataset& data,
                      const Partition& partition, const std::vector<Modality>& modalities,
                      const ExecOptions& exec = {});

// Stage 1: every client trains the audio classifier, multimodal clients
// additionally train a visual classifier. Stage 2: multimodal clients
// fine-tune a fusion model seeded from the stage-1 encoders. The reported
// audio model is the stage-1 one, so its metrics do not depend on r.
RunResult run_harmony(const RunConfig& cfg, const MultimodalDataset& data,
                      const Partition& partition, const std::vector<Modality>& modalities,
                      const ExecOptions& exec = {});

RunResult run_strategy(const RunConfig& cfg, const MultimodalDataset& data,
                       const Partition& partition, const std::vector<Modality>& modalities,
                       const ExecOptions& exec = {});

std::string strategy_name(flcore::Strategy s);
flcore::Strategy parse_strategy(const std::string& name);

}  // namespace mmfl::baselines
