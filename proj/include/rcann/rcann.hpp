#pragma once

#include "rcann/error.hpp"
#include "rcann/vectors.hpp"
#include "rcann/provider.hpp"
#include "rcann/item_store.hpp"
#include "rcann/pq.hpp"
#include "rcann/graph.hpp"
#include "rcann/builder.hpp"
#include "rcann/shardbuild.hpp"
#include "rcann/search.hpp"
#include "rcann/update.hpp"
#include "rcann/eval.hpp"
#include "rcann/index.hpp"
#include "rcann/ablation.hpp"
