//! File encodings for matrices and transforms: rotations and inertias are
//! written as row-major nested arrays.

pub mod mat3_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::dynamics::spatial::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|r, c| rows[r][c]))
    }
}

pub mod transform {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::dynamics::spatial::{Mat3, RigidTransform, Vec3};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct TransformDoc {
        #[serde(default = "identity_rows")]
        rotation: [[f64; 3]; 3],
        #[serde(default)]
        translation: [f64; 3],
    }

    fn identity_rows() -> [[f64; 3]; 3] {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    pub fn serialize<S: Serializer>(t: &RigidTransform, s: S) -> Result<S::Ok, S::Error> {
        TransformDoc {
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| t.rotation[(r, c)])),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RigidTransform, D::Error> {
        let doc = TransformDoc::deserialize(d)?;
        Ok(RigidTransform::new(
            Mat3::from_fn(|r, c| doc.rotation[r][c]),
            Vec3::from(doc.translation),
        ))
    }
}
