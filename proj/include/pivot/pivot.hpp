#pragma once

#include "pivot/align/align.hpp"
#include "pivot/config.hpp"
#include "pivot/corpus/io.hpp"
#include "pivot/corpus/world.hpp"
#include "pivot/diffcore/checkpoint.hpp"
#include "pivot/diffcore/graph.hpp"
#include "pivot/diffcore/params.hpp"
#include "pivot/eval/cluster.hpp"
#include "pivot/eval/crossmodal.hpp"
#include "pivot/eval/gate.hpp"
#include "pivot/eval/probe.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/eval/sentence.hpp"
#include "pivot/eval/word.hpp"
#include "pivot/losses/losses.hpp"
#include "pivot/model/model.hpp"
#include "pivot/tokenizer/bpe.hpp"
#include "pivot/trainer/trainer.hpp"
