//! What the trainee app shows at a POI. Shared by the curation preview and
//! the training engine so both render identical bytes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::{AssetId, PoiId};
use crate::route::{Poi, PoiKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Symbol,
    Audio,
    /// Carried as a flag only; clients decide what to vibrate.
    Tactile,
    /// Supplementary only: never the sole modality of a session.
    #[serde(rename = "ar")]
    Ar,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Text,
        Modality::Symbol,
        Modality::Audio,
        Modality::Tactile,
        Modality::Ar,
    ];
}

/// The modalities that can stand on their own.
pub fn has_primary_modality(modalities: &BTreeSet<Modality>) -> bool {
    modalities.iter().any(|m| *m != Modality::Ar)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPayload {
    pub poi_id: PoiId,
    pub poi_kind: PoiKind,
    pub photo: Option<AssetId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AssetId>,
    pub tactile: bool,
    pub ar_overlay: bool,
}

impl InstructionPayload {
    pub fn for_poi(poi: &Poi, modalities: &BTreeSet<Modality>) -> Self {
        let has = |m| modalities.contains(&m);
        let text = (!poi.instruction.is_blank()).then(|| poi.instruction.text.clone());
        Self {
            poi_id: poi.id.clone(),
            poi_kind: poi.kind,
            photo: poi.primary_photo().cloned(),
            text: text.filter(|_| has(Modality::Text)),
            symbol: poi.instruction.symbol.clone().filter(|_| has(Modality::Symbol)),
            audio: poi.instruction.audio.clone().filter(|_| has(Modality::Audio)),
            tactile: has(Modality::Tactile),
            ar_overlay: has(Modality::Ar),
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serializes")
    }
}
