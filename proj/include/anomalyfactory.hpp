#pragma once

#include "anomalyfactory/augment.hpp"
#include "anomalyfactory/config.hpp"
#include "anomalyfactory/datamodel.hpp"
#include "anomalyfactory/edgeops.hpp"
#include "anomalyfactory/evalmetrics.hpp"
#include "anomalyfactory/losses.hpp"
#include "anomalyfactory/netarch.hpp"
#include "anomalyfactory/optim.hpp"
#include "anomalyfactory/png_io.hpp"
#include "anomalyfactory/toycorpus.hpp"
#include "anomalyfactory/trainpipe.hpp"
