//! Training monitors: shared feature queues, online probes, kNN evaluation,
//! and collapse diagnostics, all driven through the callback hooks the
//! manager invokes around the training loop.

pub mod callbacks;
pub mod collapse;
pub mod knn;
pub mod queue;

pub use callbacks::{
    attach_depth_probes, Callback, CallbackCtx, LidarMonitor, OnlineKnn, OnlineProbe,
    QueueRequest, RankMeMonitor,
};
pub use collapse::{lidar, rankme, LIDAR_DELTA, LIDAR_EPS, RANKME_EPS};
pub use knn::{knn_predict, Distance};
pub use queue::{FeatureQueue, QueueRegistry};
