use crate::array::Array;
use crate::error::{Error, Result};

/// Point coordinates (meters) and per-point feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Array,
    feats: Array,
}

impl PointCloud {
    pub fn new(coords: Array, feats: Array) -> Result<Self> {
        let (n, three) =
            coords.dims().ok_or_else(|| Error::invalid(format!("coords must be N×3, got {:?}", coords.shape())))?;
        let (nf, _) =
            feats.dims().ok_or_else(|| Error::invalid(format!("feats must be N×D, got {:?}", feats.shape())))?;
        if three != 3 {
            return Err(Error::invalid(format!("coords must have 3 columns, got {three}")));
        }
        if n != nf {
            return Err(Error::invalid(format!("coords have {n} rows but feats have {nf}")));
        }
        if !coords.is_finite() || !feats.is_finite() {
            return Err(Error::invalid("point cloud contains non-finite values"));
        }
        Ok(Self { coords, feats })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.cols()
    }

    pub fn coords(&self) -> &Array {
        &self.coords
    }

    pub fn feats(&self) -> &Array {
        &self.feats
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn with_coords(&self, coords: Array) -> Result<Self> {
        Self::new(coords, self.feats.clone())
    }
}

/// A point cloud with dense ground truth and object instance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub gt_classes: Vec<usize>,
    pub instance_ids: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledScene {
    pub fn new(
        cloud: PointCloud,
        gt_classes: Vec<usize>,
        instance_ids: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let scene = Self { cloud, gt_classes, instance_ids, num_classes };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.instance_ids.iter().max().map_or(0, |m| m + 1)
    }

    /// Point indices of every instance, indexed by instance id.
    pub fn instances(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_instances()];
        for (i, &inst) in self.instance_ids.iter().enumerate() {
            out[inst].push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cloud.len();
        if n == 0 {
            return Err(Error::invalid("scene has no points"));
        }
        if self.gt_classes.len() != n || self.instance_ids.len() != n {
            return Err(Error::invalid(format!(
                "scene arrays disagree: {n} points, {} classes, {} instance ids",
                self.gt_classes.len(),
                self.instance_ids.len()
            )));
        }
        if let Some(c) = self.gt_classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::invalid(format!("class {c} outside [0, {})", self.num_classes)));
        }
        let mut class_of = vec![None; self.num_instances()];
        for (&inst, &class) in self.instance_ids.iter().zip(&self.gt_classes) {
            match class_of[inst] {
                None => class_of[inst] = Some(class),
                Some(c) if c != class => {
                    return Err(Error::invalid(format!("instance {inst} mixes classes {c} and {class}")))
                }
                _ => {}
            }
        }
        if let Some(inst) = class_of.iter().position(Option::is_none) {
            return Err(Error::invalid(format!("instance ids are not contiguous: {inst} is empty")));
        }
        Ok(())
    }
}
