//! Seeded PHI surface forms and the templates that carry them.

use rand::seq::SliceRandom;
use rand::Rng;

fn lines(data: &'static str) -> Vec<&'static str> {
    data.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub(crate) struct Lexicon {
    first: Vec<&'static str>,
    last: Vec<&'static str>,
    cities: Vec<&'static str>,
    countries: Vec<&'static str>,
    hospitals: Vec<&'static str>,
    institutions: Vec<&'static str>,
    streets: Vec<&'static str>,
    professions: Vec<&'static str>,
}

const MONTHS: [&str; 12] = [
    "enero",
    "febrero",
    "marzo",
    "abril",
    "mayo",
    "junio",
    "julio",
    "agosto",
    "septiembre",
    "octubre",
    "noviembre",
    "diciembre",
];
const RELATIVES: [&str; 10] = [
    "madre", "padre", "hermano", "hermana", "esposa", "marido", "hija", "hijo", "abuela", "tío",
];
const SEXES: [&str; 5] = ["varón", "mujer", "hombre", "femenino", "masculino"];
const OTHERS: [&str; 6] = ["jubilado", "viuda", "reclusa", "soltero", "divorciada", "estudiante"];
const STREET_KINDS: [&str; 5] = ["Calle", "Avenida", "Plaza", "Paseo", "Camino"];
const DOMAINS: [&str; 5] = ["gmail.com", "hotmail.es", "yahoo.es", "salud.es", "correo.org"];
const DNI_LETTERS: &[u8] = b"TRWAGMYFPDXBNJZSQVHLCKE";

impl Lexicon {
    pub(crate) fn load() -> Self {
        Self {
            first: lines(include_str!("../../data/lexicon/nombres.txt")),
            last: lines(include_str!("../../data/lexicon/apellidos.txt")),
            cities: lines(include_str!("../../data/lexicon/ciudades.txt")),
            countries: lines(include_str!("../../data/lexicon/paises.txt")),
            hospitals: lines(include_str!("../../data/lexicon/hospitales.txt")),
            institutions: lines(include_str!("../../data/lexicon/instituciones.txt")),
            streets: lines(include_str!("../../data/lexicon/calles.txt")),
            professions: lines(include_str!("../../data/lexicon/profesiones.txt")),
        }
    }

    fn pick<R: Rng + ?Sized>(list: &[&'static str], rng: &mut R) -> &'static str {
        list.choose(rng).expect("non-empty lexicon")
    }

    fn digits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> String {
        (0..n).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
    }

    fn ascii_lower(s: &str) -> String {
        s.chars()
            .map(|c| match c {
                'á' | 'Á' => 'a',
                'é' | 'É' => 'e',
                'í' | 'Í' => 'i',
                'ó' | 'Ó' => 'o',
                'ú' | 'Ú' => 'u',
                'ñ' | 'Ñ' => 'n',
                c => c.to_ascii_lowercase(),
            })
            .filter(char::is_ascii_alphanumeric)
            .collect()
    }

    /// A surface form for `class`; `None` for unknown classes.
    pub(crate) fn sample<R: Rng + ?Sized>(&self, class: &str, rng: &mut R) -> Option<String> {
        let p = |l: &[&'static str], rng: &mut R| Self::pick(l, rng).to_string();
        let d = |n: usize, rng: &mut R| Self::digits(n, rng);
        Some(match class {
            "NOMBRE_SUJETO_ASISTENCIA" => {
                format!("{} {} {}", p(&self.first, rng), p(&self.last, rng), p(&self.last, rng))
            }
            "NOMBRE_PERSONAL_SANITARIO" => format!("{} {}", p(&self.first, rng), p(&self.last, rng)),
            "FAMILIARES_SUJETO_ASISTENCIA" => p(&RELATIVES, rng),
            "EDAD_SUJETO_ASISTENCIA" => format!("{} años", rng.gen_range(1..100)),
            "SEXO_SUJETO_ASISTENCIA" => p(&SEXES, rng),
            "OTROS_SUJETO_ASISTENCIA" => p(&OTHERS, rng),
            "PROFESION" => p(&self.professions, rng),
            "FECHAS" => {
                let (day, month, year) = (
                    rng.gen_range(1..29),
                    rng.gen_range(1..13usize),
                    rng.gen_range(1990..2020),
                );
                if rng.gen_bool(0.5) {
                    format!("{day:02}/{month:02}/{year}")
                } else {
                    format!("{day} de {} de {year}", MONTHS[month - 1])
                }
            }
            "CALLE" => format!(
                "{} {} {}",
                p(&STREET_KINDS, rng),
                p(&self.streets, rng),
                rng.gen_range(1..150)
            ),
            "TERRITORIO" => {
                if rng.gen_bool(0.25) {
                    format!("{:02}{}", rng.gen_range(1..53), d(3, rng))
                } else {
                    p(&self.cities, rng)
                }
            }
            "PAIS" => p(&self.countries, rng),
            "HOSPITAL" => p(&self.hospitals, rng),
            "INSTITUCION" => p(&self.institutions, rng),
            "CENTRO_SALUD" => format!("Centro de Salud {}", p(&self.cities, rng)),
            "CORREO_ELECTRONICO" => format!(
                "{}.{}@{}",
                Self::ascii_lower(Self::pick(&self.first, rng)),
                Self::ascii_lower(Self::pick(&self.last, rng)),
                p(&DOMAINS, rng)
            ),
            "NUMERO_TELEFONO" => format!("6{} {} {}", d(2, rng), d(3, rng), d(3, rng)),
            "NUMERO_FAX" => format!("9{} {} {} {}", d(1, rng), d(3, rng), d(2, rng), d(2, rng)),
            "URL_WEB" => format!(
                "https://www.{}.es/{}",
                Self::ascii_lower(Self::pick(&self.cities, rng)),
                ["citas", "urgencias", "contacto", "pacientes"][rng.gen_range(0..4)]
            ),
            "DIREC_PROT_INTERNET" => format!(
                "{}.{}.{}.{}",
                rng.gen_range(1..255),
                rng.gen_range(0..256),
                rng.gen_range(0..256),
                rng.gen_range(1..255)
            ),
            "ID_SUJETO_ASISTENCIA" => d(8, rng),
            "ID_CONTACTO_ASISTENCIAL" => format!("E{}", d(7, rng)),
            "ID_ASEGURAMIENTO" => format!("{} {} {}", d(2, rng), d(8, rng), d(2, rng)),
            "ID_TITULACION_PERSONAL_SANITARIO" => d(9, rng),
            "ID_EMPLEO_PERSONAL_SANITARIO" => format!("EMP{}", d(6, rng)),
            "IDENTIF_VEHICULOS_NRSERIE_PLACAS" => {
                let letters: String = (0..3)
                    .map(|_| char::from(b"BCDFGHJKLMNPRSTVWXYZ"[rng.gen_range(0..20)]))
                    .collect();
                format!("{} {letters}", d(4, rng))
            }
            "IDENTIF_DISPOSITIVOS_NRSERIE" => format!("SN{}-{}", d(4, rng), d(4, rng)),
            "IDENTIF_BIOMETRICOS" => format!("BIO{}", d(10, rng)),
            "NUMERO_BENEF_PLAN_SALUD" => format!("BEN{}", d(9, rng)),
            "OTRO_NUMERO_IDENTIF" => {
                let n: u32 = rng.gen_range(10_000_000..100_000_000);
                format!("{n}{}", char::from(DNI_LETTERS[(n % 23) as usize]))
            }
            _ => return None,
        })
    }
}

/// `(header/footer field templates, narrative sentence templates)` for a
/// class; each template has exactly one `{}` slot.
pub(crate) fn templates(class: &str) -> Option<(&'static [&'static str], &'static [&'static str])> {
    Some(match class {
        "NOMBRE_SUJETO_ASISTENCIA" => (
            &["Nombre: {}.", "Paciente: {}."],
            &[
                "Se valora a {} en consulta externa.",
                "El paciente {} acude por dolor abdominal.",
            ],
        ),
        "NOMBRE_PERSONAL_SANITARIO" => (
            &["Médico: Dr. {}.", "Facultativo responsable: {}."],
            &[
                "Es valorado por la doctora {} en urgencias.",
                "Informe firmado por {} tras la revisión.",
            ],
        ),
        "FAMILIARES_SUJETO_ASISTENCIA" => (
            &["Acompañante: {}.", "Contacto familiar: {}."],
            &[
                "Acude acompañado de su {} al servicio.",
                "Refiere antecedentes de diabetes en su {} y no otros.",
            ],
        ),
        "EDAD_SUJETO_ASISTENCIA" => (
            &["Edad: {}.", "Edad del paciente: {}."],
            &[
                "Paciente de {} sin alergias conocidas.",
                "Se trata de un caso de {} con fiebre persistente.",
            ],
        ),
        "SEXO_SUJETO_ASISTENCIA" => (
            &["Sexo: {}.", "Género: {}."],
            &[
                "Paciente {} que consulta por disnea.",
                "Se explora a paciente {} con buen estado general.",
            ],
        ),
        "OTROS_SUJETO_ASISTENCIA" => (
            &["Situación social: {}.", "Observaciones: {}."],
            &[
                "Refiere ser {} desde hace años.",
                "La paciente, {}, vive sola en su domicilio.",
            ],
        ),
        "PROFESION" => (
            &["Profesión: {}.", "Ocupación: {}."],
            &[
                "Trabaja como {} en una empresa local.",
                "De profesión {} y sin hábitos tóxicos.",
            ],
        ),
        "FECHAS" => (
            &["Fecha de ingreso: {}.", "Fecha de alta: {}."],
            &[
                "Ingresa el {} por dolor torácico.",
                "Se realiza control analítico el {} sin incidencias.",
            ],
        ),
        "CALLE" => (
            &["Domicilio: {}.", "Dirección: {}."],
            &[
                "Reside en {} con su familia.",
                "Se traslada a su domicilio en {} tras el alta.",
            ],
        ),
        "TERRITORIO" => (
            &["Localidad: {}.", "Municipio: {}."],
            &[
                "Natural de {} y residente en la zona.",
                "Es derivado desde {} para estudio.",
            ],
        ),
        "PAIS" => (
            &["Nacionalidad: {}.", "País de origen: {}."],
            &[
                "Paciente procedente de {} que consulta por tos.",
                "Viajó recientemente a {} por motivos laborales.",
            ],
        ),
        "HOSPITAL" => (
            &["Centro: {}.", "Hospital de referencia: {}."],
            &[
                "Es trasladado al {} para cirugía.",
                "Ingresa en planta del {} para observación.",
            ],
        ),
        "INSTITUCION" => (
            &["Entidad: {}.", "Organismo: {}."],
            &[
                "Se remite informe a {} según protocolo.",
                "Tramita la incapacidad ante {} sin demora.",
            ],
        ),
        "CENTRO_SALUD" => (
            &["Atención primaria: {}.", "Centro de referencia: {}."],
            &[
                "Seguimiento en el {} cada mes.",
                "Es remitido desde el {} por su médico de familia.",
            ],
        ),
        "CORREO_ELECTRONICO" => (
            &["Correo electrónico: {}.", "Email: {}."],
            &[
                "Puede contactar por correo en {} para resultados.",
                "Se envían las pruebas a {} esta semana.",
            ],
        ),
        "NUMERO_TELEFONO" => (
            &["Teléfono: {}.", "Tel de contacto: {}."],
            &[
                "Se contacta con la familia en el {} sin respuesta.",
                "Deja como teléfono el {} para avisos.",
            ],
        ),
        "NUMERO_FAX" => (
            &["Fax: {}.", "Número de fax: {}."],
            &[
                "Se remite el informe al fax {} del centro.",
                "Enviar resultados al fax {} urgentemente.",
            ],
        ),
        "URL_WEB" => (
            &["Web: {}.", "Portal del paciente: {}."],
            &[
                "Puede solicitar cita en {} cuando lo precise.",
                "Más información en {} para familiares.",
            ],
        ),
        "DIREC_PROT_INTERNET" => (
            &["IP de registro: {}.", "Terminal: {}."],
            &[
                "La solicitud se registró desde la IP {} del servicio.",
                "El equipo {} almacena las imágenes.",
            ],
        ),
        "ID_SUJETO_ASISTENCIA" => (
            &["NHC: {}.", "Número de historia: {}."],
            &[
                "Consta con historia clínica {} en el archivo.",
                "Se revisa la historia {} del paciente.",
            ],
        ),
        "ID_CONTACTO_ASISTENCIAL" => (
            &["Episodio: {}.", "Nº episodio: {}."],
            &[
                "Se abre el episodio {} en urgencias.",
                "Queda registrado en el episodio {} del día.",
            ],
        ),
        "ID_ASEGURAMIENTO" => (
            &["NASS: {}.", "Nº Seguridad Social: {}."],
            &[
                "Afiliado con número {} a la seguridad social.",
                "Presenta tarjeta sanitaria {} vigente.",
            ],
        ),
        "ID_TITULACION_PERSONAL_SANITARIO" => (
            &["Nº Colegiado: {}.", "Colegiado: {}."],
            &[
                "Firmado por el colegiado {} del servicio.",
                "Prescribe el facultativo con número {} de colegiación.",
            ],
        ),
        "ID_EMPLEO_PERSONAL_SANITARIO" => (
            &["Código de empleado: {}.", "Nº empleado: {}."],
            &[
                "Registra la toma el empleado {} del turno.",
                "Consta el código {} en la hoja de enfermería.",
            ],
        ),
        "IDENTIF_VEHICULOS_NRSERIE_PLACAS" => (
            &["Matrícula: {}.", "Vehículo: {}."],
            &[
                "Accidente con el vehículo matrícula {} en la autovía.",
                "Conducía el turismo {} en el momento del impacto.",
            ],
        ),
        "IDENTIF_DISPOSITIVOS_NRSERIE" => (
            &["Marcapasos: {}.", "Dispositivo: {}."],
            &[
                "Portador de marcapasos con serie {} desde hace años.",
                "Se implanta el dispositivo {} sin complicaciones.",
            ],
        ),
        "IDENTIF_BIOMETRICOS" => (
            &["Huella: {}.", "Biometría: {}."],
            &[
                "Se registra la huella {} en el sistema.",
                "Identificación biométrica {} verificada.",
            ],
        ),
        "NUMERO_BENEF_PLAN_SALUD" => (
            &["Beneficiario: {}.", "Nº beneficiario: {}."],
            &[
                "Figura como beneficiario {} de la mutua.",
                "Cobertura con el plan {} activo.",
            ],
        ),
        "OTRO_NUMERO_IDENTIF" => (
            &["DNI: {}.", "Documento: {}."],
            &[
                "Se identifica con el documento {} en admisión.",
                "Presenta el DNI {} al ingreso.",
            ],
        ),
        _ => return None,
    })
}

/// Narrative sentences without PHI.
pub(crate) const FILLERS: [&str; 16] = [
    "No refiere alergias medicamentosas conocidas.",
    "A la exploración presenta buen estado general.",
    "Se solicita analítica completa y radiografía de tórax.",
    "La auscultación cardiopulmonar es normal.",
    "Abdomen blando y depresible sin dolor a la palpación.",
    "Se pauta tratamiento con paracetamol cada ocho horas.",
    "Evoluciona favorablemente durante el ingreso.",
    "Se recomienda control por su médico de atención primaria.",
    "Niega hábitos tóxicos.",
    "El electrocardiograma muestra ritmo sinusal.",
    "Se decide alta hospitalaria con tratamiento domiciliario.",
    "Presenta tensión arterial dentro de la normalidad.",
    "Refiere cefalea de tres días de evolución.",
    "Se realiza ecografía abdominal sin hallazgos.",
    "Antecedentes personales sin interés.",
    "Tolera dieta oral sin incidencias.",
];
